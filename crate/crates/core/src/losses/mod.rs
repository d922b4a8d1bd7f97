//! Joint cross-entropy, cross-modal consistency regularization and R-drop.
//!
//! All distances reduce with a mean over valid positions and let gradients
//! flow into both arguments.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{BoundParams, Model, TapBundle};
use crate::numerics::{Graph, RngStream, Tensor, Var};

/// Probability floor applied inside the logarithms of the KL distance.
pub const KL_FLOOR: f64 = 1e-12;

/// Row sums of a KL argument must be within this of 1.
const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DistanceMetric {
    Mse,
    Cos,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TapPoint {
    Enc,
    Xattn,
    Lds,
    Logits,
    Softmax,
}

impl TapPoint {
    pub const ALL: [TapPoint; 5] = [
        TapPoint::Enc,
        TapPoint::Xattn,
        TapPoint::Lds,
        TapPoint::Logits,
        TapPoint::Softmax,
    ];

    pub fn select(self, bundle: &TapBundle) -> Var {
        match self {
            TapPoint::Enc => bundle.enc,
            TapPoint::Xattn => bundle.xattn,
            TapPoint::Lds => bundle.lds,
            TapPoint::Logits => bundle.logits,
            TapPoint::Softmax => bundle.softmax,
        }
    }
}

/// Every legal tap/metric pair: each tap with MSE and COS, plus softmax KL.
pub fn legal_combinations() -> Vec<(TapPoint, DistanceMetric)> {
    let mut out = Vec::new();
    for tap in TapPoint::ALL {
        out.push((tap, DistanceMetric::Mse));
        out.push((tap, DistanceMetric::Cos));
    }
    out.push((TapPoint::Softmax, DistanceMetric::Kl));
    out
}

pub fn check_legal(tap: TapPoint, metric: DistanceMetric) -> Result<()> {
    if metric == DistanceMetric::Kl && tap != TapPoint::Softmax {
        return Err(Error::Config(format!(
            "KL distance is only defined at the softmax tap, not {tap:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub alpha_cr: f64,
    pub alpha_rd: f64,
    pub cr_tap: TapPoint,
    pub cr_metric: DistanceMetric,
    pub rd_tap: TapPoint,
    pub rd_metric: DistanceMetric,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_s: 1.0,
            alpha_t: 1.0,
            alpha_cr: 0.0,
            alpha_rd: 0.0,
            cr_tap: TapPoint::Softmax,
            cr_metric: DistanceMetric::Kl,
            rd_tap: TapPoint::Softmax,
            rd_metric: DistanceMetric::Kl,
        }
    }
}

impl LossWeights {
    /// `α_s = 1` with the given ST/MT weights and no consistency terms.
    pub fn ce_only(alpha_t: f64) -> Self {
        Self {
            alpha_t,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_s != 1.0 {
            return Err(Error::Config(format!(
                "alpha_s is fixed to 1, got {}",
                self.alpha_s
            )));
        }
        for (name, v) in [
            ("alpha_t", self.alpha_t),
            ("alpha_cr", self.alpha_cr),
            ("alpha_rd", self.alpha_rd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        check_legal(self.cr_tap, self.cr_metric)?;
        check_legal(self.rd_tap, self.rd_metric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_st: f64,
    pub ce_mt: f64,
    pub cr: f64,
    pub rd: f64,
    pub total: f64,
}

fn validate_rows(
    g: &Graph,
    metric: DistanceMetric,
    a: Var,
    b: Var,
    valid: &[bool],
) -> Result<Vec<usize>> {
    let (av, bv) = (g.value(a), g.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::Shape(format!(
            "distance operands {:?} vs {:?}",
            av.shape(),
            bv.shape()
        )));
    }
    if valid.len() != av.rows() {
        return Err(Error::Shape(format!(
            "mask covers {} rows, operands have {}",
            valid.len(),
            av.rows()
        )));
    }
    let rows: Vec<usize> = (0..valid.len()).filter(|r| valid[*r]).collect();
    if rows.is_empty() {
        return Err(Error::Usage("distance over zero valid positions".into()));
    }
    for &r in &rows {
        match metric {
            DistanceMetric::Kl => {
                for row in [av.row(r), bv.row(r)] {
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
                        return Err(Error::Numeric(format!(
                            "KL operand row {r} is not a probability vector (sum {sum})"
                        )));
                    }
                }
            }
            DistanceMetric::Cos => {
                for row in [av.row(r), bv.row(r)] {
                    if row.iter().all(|v| *v == 0.0) {
                        return Err(Error::Numeric(format!(
                            "zero-norm vector at row {r} under COS"
                        )));
                    }
                }
            }
            DistanceMetric::Mse => {}
        }
    }
    Ok(rows)
}

/// Mean distance over the valid rows of two `[N, d]` representations.
///
/// * MSE: `‖a − b‖² / d`
/// * COS: `1 − a·b / (‖a‖ ‖b‖)`
/// * KL:  `½ (a·log(a/b) + b·log(b/a))`, logs floored at [`KL_FLOOR`]
pub fn distance(
    g: &mut Graph,
    metric: DistanceMetric,
    a: Var,
    b: Var,
    valid: &[bool],
) -> Result<Var> {
    let rows = validate_rows(g, metric, a, b, valid)?;
    let d = g.value(a).last_dim();
    let (a, b) = if rows.len() == valid.len() {
        (a, b)
    } else {
        let a2 = g.reshape(a, vec![valid.len(), d]);
        let b2 = g.reshape(b, vec![valid.len(), d]);
        (g.embedding(a2, &rows), g.embedding(b2, &rows))
    };
    let per_row = match metric {
        DistanceMetric::Mse => {
            let diff = g.sub(a, b);
            let sq = g.mul(diff, diff);
            let s = g.sum_lastdim(sq);
            g.scale(s, 1.0 / d as f64)
        }
        DistanceMetric::Cos => {
            let ab = g.mul(a, b);
            let dot = g.sum_lastdim(ab);
            let aa = g.mul(a, a);
            let na = g.sum_lastdim(aa);
            let bb = g.mul(b, b);
            let nb = g.sum_lastdim(bb);
            let nn = g.mul(na, nb);
            let den = g.sqrt(nn);
            let cos = g.div(dot, den);
            let neg = g.scale(cos, -1.0);
            g.add_scalar(neg, 1.0)
        }
        DistanceMetric::Kl => {
            let fa = g.clamp_min(a, KL_FLOOR);
            let fb = g.clamp_min(b, KL_FLOOR);
            let la = g.log(fa);
            let lb = g.log(fb);
            let dp = g.sub(a, b);
            let dl = g.sub(la, lb);
            let prod = g.mul(dp, dl);
            let s = g.sum_lastdim(prod);
            g.scale(s, 0.5)
        }
    };
    Ok(g.mean(per_row))
}

/// Per-token mean negative log-likelihood, then mean over the batch.
pub fn ce_loss(
    g: &mut Graph,
    bundle: &TapBundle,
    target_out: &[usize],
    target_lens: &[usize],
) -> Result<Var> {
    let vocab = g.value(bundle.logits).last_dim();
    let rows = bundle.batch * bundle.dec_len;
    if target_out.len() != rows || target_lens.len() != bundle.batch {
        return Err(Error::Shape("targets do not match decoder taps".into()));
    }
    let mut weights = vec![0.0; rows];
    for b in 0..bundle.batch {
        let len = target_lens[b];
        if len == 0 || len > bundle.dec_len {
            return Err(Error::Usage(format!("target length {len} invalid")));
        }
        for t in 0..len {
            let r = b * bundle.dec_len + t;
            if target_out[r] >= vocab {
                return Err(Error::Usage(format!(
                    "target id {} outside vocabulary {vocab}",
                    target_out[r]
                )));
            }
            weights[r] = 1.0 / (len as f64 * bundle.batch as f64);
        }
    }
    Ok(g.cross_entropy(bundle.logits, target_out, &weights))
}

/// Masked mean over time of an encoder tap: `[B*T, d] → [B, d]`.
fn pool_encoder(g: &mut Graph, bundle: &TapBundle) -> Var {
    let (b, t) = (bundle.batch, bundle.enc_len);
    let mut pool = vec![0.0; b * b * t];
    for i in 0..b {
        let valid = &bundle.enc_valid[i * t..(i + 1) * t];
        let n = valid.iter().filter(|v| **v).count() as f64;
        for (j, v) in valid.iter().enumerate() {
            if *v {
                pool[i * b * t + i * t + j] = 1.0 / n;
            }
        }
    }
    let p = g.constant(Tensor::new(vec![b, b * t], pool).unwrap());
    g.matmul(p, bundle.enc)
}

/// Distance between two bundles at one tap point (encoder taps are pooled).
pub fn tap_distance(
    g: &mut Graph,
    tap: TapPoint,
    metric: DistanceMetric,
    first: &TapBundle,
    second: &TapBundle,
) -> Result<Var> {
    check_legal(tap, metric)?;
    if first.batch != second.batch {
        return Err(Error::Shape("bundles cover different batch sizes".into()));
    }
    match tap {
        TapPoint::Enc => {
            let a = pool_encoder(g, first);
            let b = pool_encoder(g, second);
            distance(g, metric, a, b, &vec![true; first.batch])
        }
        _ => {
            if first.dec_valid != second.dec_valid {
                return Err(Error::Shape("decoder taps are not aligned".into()));
            }
            distance(
                g,
                metric,
                tap.select(first),
                tap.select(second),
                &first.dec_valid,
            )
        }
    }
}

/// `α_cr · D(f_s, f_t)` between the speech and text passes.
pub fn consistency_loss(
    g: &mut Graph,
    weights: &LossWeights,
    speech: &TapBundle,
    text: &TapBundle,
) -> Result<Var> {
    check_legal(weights.cr_tap, weights.cr_metric)?;
    if weights.alpha_cr == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let d = tap_distance(g, weights.cr_tap, weights.cr_metric, speech, text)?;
    Ok(g.scale(d, weights.alpha_cr))
}

/// `α_rd · D(f_s, f_s')` between two dropout-perturbed speech passes.
pub fn rdrop_loss(
    g: &mut Graph,
    weights: &LossWeights,
    first: &TapBundle,
    second: &TapBundle,
) -> Result<Var> {
    check_legal(weights.rd_tap, weights.rd_metric)?;
    if weights.alpha_rd == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let d = tap_distance(g, weights.rd_tap, weights.rd_metric, first, second)?;
    Ok(g.scale(d, weights.alpha_rd))
}

/// Dropout streams for the (up to) three forward passes of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassStreams {
    pub speech: RngStream,
    pub speech_second: RngStream,
    pub text: RngStream,
}

impl PassStreams {
    pub fn for_step(seed: u64, step: u64) -> Self {
        let base = step.wrapping_mul(3);
        Self {
            speech: RngStream::new(seed, base),
            speech_second: RngStream::new(seed, base + 1),
            text: RngStream::new(seed, base + 2),
        }
    }
}

/// Graph handle of the total loss plus its numeric decomposition.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Runs the forward passes the weights require and composes
/// `α_s·ce_st + α_t·ce_mt + cr + rd`.
///
/// A text pass runs when `α_t > 0` or `α_cr > 0`; a second speech pass only
/// when `α_rd > 0`, in which case `ce_st` is the mean of both passes' CE.
pub fn total_loss(
    g: &mut Graph,
    params: &BoundParams,
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    streams: &PassStreams,
    dropout_on: bool,
) -> Result<TotalLoss> {
    weights.validate()?;
    let mut rng = streams.speech.clone();
    let speech = model.forward_speech(g, params, batch, &mut rng, dropout_on)?;
    let mut ce_st = ce_loss(g, &speech, &batch.target_out, &batch.target_lens)?;

    let mut rd = g.constant(Tensor::scalar(0.0));
    if weights.alpha_rd > 0.0 {
        let mut rng2 = streams.speech_second.clone();
        let second = model.forward_speech(g, params, batch, &mut rng2, dropout_on)?;
        let ce2 = ce_loss(g, &second, &batch.target_out, &batch.target_lens)?;
        let both = g.add(ce_st, ce2);
        ce_st = g.scale(both, 0.5);
        rd = rdrop_loss(g, weights, &speech, &second)?;
    }

    let mut ce_mt = None;
    let mut cr = g.constant(Tensor::scalar(0.0));
    if weights.alpha_t > 0.0 || weights.alpha_cr > 0.0 {
        let mut rng3 = streams.text.clone();
        let text = model.forward_text(g, params, batch, &mut rng3, dropout_on)?;
        ce_mt = Some(ce_loss(g, &text, &batch.target_out, &batch.target_lens)?);
        cr = consistency_loss(g, weights, &speech, &text)?;
    }

    let mut total = g.scale(ce_st, weights.alpha_s);
    if let Some(mt) = ce_mt {
        let weighted = g.scale(mt, weights.alpha_t);
        total = g.add(total, weighted);
    }
    total = g.add(total, cr);
    total = g.add(total, rd);

    let breakdown = LossBreakdown {
        ce_st: g.value(ce_st).item(),
        ce_mt: ce_mt.map(|v| g.value(v).item()).unwrap_or(0.0),
        cr: g.value(cr).item(),
        rd: g.value(rd).item(),
        total: g.value(total).item(),
    };
    Ok(TotalLoss { total, breakdown })
}
