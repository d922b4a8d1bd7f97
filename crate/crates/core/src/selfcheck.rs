//! Finite-difference self-test over every tape primitive and every legal
//! consistency combination of the full training loss.

use rand::Rng;
use serde::Serialize;

use crate::data::{generate, Batch, CorpusSpec, Task, Triple, PAD};
use crate::error::Result;
use crate::losses::{legal_combinations, total_loss, LossWeights, PassStreams};
use crate::model::{BoundParams, Model, ModelConfig};
use crate::numerics::{
    gradient_report, AttentionSpec, ConvGeometry, Graph, RngStream, Tensor, Var,
};

/// Relative-error bound a case must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

type ScalarFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// A scalar function of some leaves, checked against finite differences.
pub struct GradCase {
    pub name: String,
    pub leaves: Vec<Tensor>,
    pub f: ScalarFn,
}

impl GradCase {
    fn new(
        name: &str,
        leaves: Vec<Tensor>,
        f: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            leaves,
            f: Box::new(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn run_case(case: &GradCase, tolerance: f64) -> GradRow {
    let err = gradient_report(&case.leaves, FD_STEP, &case.f).max_rel_error;
    GradRow {
        name: case.name.clone(),
        max_rel_error: err,
        passed: err <= tolerance,
    }
}

/// Fixed, uneven weights so a reduction does not hide sign errors.
fn reduce(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len();
    let w = (0..n)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0 + 0.3)
        .collect();
    g.weighted_sum(x, w)
}

struct Sampler(rand_chacha::ChaCha8Rng);

impl Sampler {
    fn new(seed: u64) -> Self {
        Self(RngStream::new(seed, 0).next_generator())
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.0.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    /// Magnitudes in `[0.2, 1.5]` with random sign: clear of kinks at zero.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = self.0.random_range(0.2..1.5);
                if self.0.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), v).unwrap()
    }
}

/// One case per graph primitive.
pub fn primitive_cases() -> Vec<GradCase> {
    let mut s = Sampler::new(17);
    let mut cases = Vec::new();
    let m34 = |s: &mut Sampler| s.uniform(&[3, 4], -1.0, 1.0);

    cases.push(GradCase::new(
        "matmul",
        vec![
            s.uniform(&[2, 3, 4], -1.0, 1.0),
            s.uniform(&[4, 5], -1.0, 1.0),
        ],
        |g, v| {
            let y = g.matmul(v[0], v[1]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "add",
        vec![m34(&mut s), m34(&mut s)],
        |g, v| {
            let y = g.add(v[0], v[1]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "sub",
        vec![m34(&mut s), m34(&mut s)],
        |g, v| {
            let y = g.sub(v[0], v[1]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "mul",
        vec![m34(&mut s), m34(&mut s)],
        |g, v| {
            let y = g.mul(v[0], v[1]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "div",
        vec![m34(&mut s), s.away_from_zero(&[3, 4])],
        |g, v| {
            let y = g.div(v[0], v[1]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "add_row",
        vec![m34(&mut s), s.uniform(&[4], -1.0, 1.0)],
        |g, v| {
            let y = g.add_row(v[0], v[1]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new("reshape", vec![m34(&mut s)], |g, v| {
        let r = g.reshape(v[0], vec![2, 6]);
        let sq = g.mul(r, r);
        reduce(g, sq)
    }));
    let mask = s.uniform(&[12], -2.0, 2.0).values().to_vec();
    cases.push(GradCase::new(
        "mul_const",
        vec![m34(&mut s)],
        move |g, v| {
            let y = g.mul_const(v[0], mask.clone());
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new("scale", vec![m34(&mut s)], |g, v| {
        let y = g.scale(v[0], -1.7);
        reduce(g, y)
    }));
    cases.push(GradCase::new("add_scalar", vec![m34(&mut s)], |g, v| {
        let y = g.add_scalar(v[0], 0.4);
        let sq = g.mul(y, y);
        reduce(g, sq)
    }));
    cases.push(GradCase::new(
        "relu",
        vec![s.away_from_zero(&[3, 4])],
        |g, v| {
            let y = g.relu(v[0]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new("exp", vec![m34(&mut s)], |g, v| {
        let y = g.exp(v[0]);
        reduce(g, y)
    }));
    cases.push(GradCase::new(
        "log",
        vec![s.uniform(&[3, 4], 0.2, 2.0)],
        |g, v| {
            let y = g.log(v[0]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "sqrt",
        vec![s.uniform(&[3, 4], 0.2, 2.0)],
        |g, v| {
            let y = g.sqrt(v[0]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "clamp_min",
        vec![s.away_from_zero(&[3, 4])],
        |g, v| {
            let y = g.clamp_min(v[0], 0.0);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new("sum_lastdim", vec![m34(&mut s)], |g, v| {
        let y = g.sum_lastdim(v[0]);
        let sq = g.mul(y, y);
        reduce(g, sq)
    }));
    cases.push(GradCase::new("weighted_sum", vec![m34(&mut s)], |g, v| {
        let sq = g.mul(v[0], v[0]);
        g.weighted_sum(sq, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect())
    }));
    cases.push(GradCase::new("sum", vec![m34(&mut s)], |g, v| {
        let e = g.exp(v[0]);
        g.sum(e)
    }));
    cases.push(GradCase::new("mean", vec![m34(&mut s)], |g, v| {
        let e = g.exp(v[0]);
        g.mean(e)
    }));
    cases.push(GradCase::new(
        "softmax",
        vec![s.uniform(&[3, 5], -2.0, 2.0)],
        |g, v| {
            let y = g.softmax(v[0]);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "cross_entropy",
        vec![s.uniform(&[4, 5], -2.0, 2.0)],
        |g, v| g.cross_entropy(v[0], &[0, 3, 9, 4], &[1.0, 0.5, 0.0, 2.0]),
    ));
    cases.push(GradCase::new(
        "layer_norm",
        vec![
            s.uniform(&[3, 6], -2.0, 2.0),
            s.uniform(&[6], 0.5, 1.5),
            s.uniform(&[6], -0.5, 0.5),
        ],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            reduce(g, y)
        },
    ));
    cases.push(GradCase::new(
        "embedding",
        vec![s.uniform(&[5, 3], -1.0, 1.0)],
        |g, v| {
            let y = g.embedding(v[0], &[4, 1, 4, 0]);
            let sq = g.mul(y, y);
            reduce(g, sq)
        },
    ));
    cases.push(GradCase::new(
        "im2col",
        vec![s.uniform(&[2 * 5, 3], -1.0, 1.0)],
        |g, v| {
            let geom = ConvGeometry {
                batch: 2,
                t_in: 5,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let y = g.im2col(v[0], geom);
            let sq = g.mul(y, y);
            reduce(g, sq)
        },
    ));
    for causal in [false, true] {
        let name = if causal {
            "attention_causal"
        } else {
            "attention_masked"
        };
        let (b, tq, tk, d) = (2, 3, if causal { 3 } else { 4 }, 4);
        let leaves = vec![
            s.uniform(&[b * tq, d], -1.0, 1.0),
            s.uniform(&[b * tk, d], -1.0, 1.0),
            s.uniform(&[b * tk, d], -1.0, 1.0),
        ];
        let mut key_valid = vec![true; b * tk];
        if !causal {
            key_valid[b * tk - 1] = false;
        }
        cases.push(GradCase::new(name, leaves, move |g, v| {
            let spec = AttentionSpec {
                batch: b,
                q_len: tq,
                k_len: tk,
                heads: 2,
                causal,
                key_valid: key_valid.clone(),
            };
            let y = g.attention(v[0], v[1], v[2], spec);
            reduce(g, y)
        }));
    }
    cases.push(GradCase::new("dropout", vec![m34(&mut s)], |g, v| {
        let mut rng = RngStream::new(5, 9);
        let y = g.dropout(v[0], 0.3, &mut rng).expect("valid rate");
        let sq = g.mul(y, y);
        reduce(g, sq)
    }));
    cases.push(GradCase::new("custom", vec![m34(&mut s)], |g, v| {
        let y = square_custom(g, v[0], 2.0);
        reduce(g, y)
    }));
    cases
}

/// `x²` as a custom op whose backward reports `k·x`; only `k = 2` is right.
fn square_custom(g: &mut Graph, x: Var, k: f64) -> Var {
    let xv = g.value(x);
    let sq = Tensor::new(
        xv.shape().to_vec(),
        xv.values().iter().map(|a| a * a).collect(),
    )
    .unwrap();
    g.custom(
        &[x],
        sq,
        Box::new(move |ins, _, gout| {
            vec![ins[0]
                .values()
                .iter()
                .zip(gout)
                .map(|(a, g)| k * a * g)
                .collect()]
        }),
    )
}

/// A deliberately wrong backward rule; the harness must flag it.
pub fn injected_bug_case() -> GradCase {
    let x = Sampler::new(23).uniform(&[3, 4], -1.0, 1.0);
    GradCase::new("injected_bug", vec![x], |g, v| {
        let y = square_custom(g, v[0], 1.0);
        reduce(g, y)
    })
}

/// Smallest model that exercises every layer type.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        d_model: 8,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 12,
        dropout: 0.1,
        frame_dim: 3,
        subsample_stride: 2,
        subsample_layers: 2,
    }
}

/// A 2-sample batch matching [`toy_model_config`].
pub fn toy_batch(seed: u64) -> Result<Batch> {
    let spec = CorpusSpec {
        vocab_size: 9,
        min_len: 2,
        max_len: 3,
        size: 2,
        frames_per_token: 2,
        frame_dim: 3,
        noise_sigma: 0.1,
        task: Task::ShiftMap,
        seed,
    };
    let triples = generate(&spec)?.triples;
    let refs: Vec<&Triple> = triples.iter().collect();
    Batch::from_triples(&refs, PAD)
}

/// Full training loss with every term active and dropout on, one case per
/// legal tap × metric combination (used as both the cr and the rd term).
pub fn loss_cases() -> Result<Vec<GradCase>> {
    let model = std::rc::Rc::new(Model::build(&toy_model_config(), &RngStream::new(8, 0))?);
    let batch = std::rc::Rc::new(toy_batch(3)?);
    let mut cases = Vec::new();
    for (tap, metric) in legal_combinations() {
        let w = LossWeights {
            alpha_t: 0.5,
            alpha_cr: 1.3,
            alpha_rd: 0.7,
            cr_tap: tap,
            cr_metric: metric,
            rd_tap: tap,
            rd_metric: metric,
            ..LossWeights::default()
        };
        w.validate()?;
        let (m, b) = (model.clone(), batch.clone());
        let name = format!("total_loss/{tap:?}/{metric:?}");
        cases.push(GradCase::new(
            &name,
            model.params().to_vec(),
            move |g, vars| {
                let p = BoundParams::from_vars(vars.to_vec());
                total_loss(g, &p, &m, &b, &w, &PassStreams::for_step(1, 2), true)
                    .expect("validated weights")
                    .total
            },
        ));
    }
    Ok(cases)
}
