//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar replays the tape in reverse and adds
//! `∂loss/∂leaf` into each leaf's gradient buffer. Shape violations inside
//! graph operations are programmer errors and panic; callers validate user
//! input before building a graph.

use super::kernels::{axpy, dot, gemm};
use super::rng::{dropout_mask, RngStream};
use super::tensor::{softmax_rows_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a multi-head scaled dot-product attention call over a
/// flattened batch: queries are `[batch * q_len, d]`, keys/values
/// `[batch * k_len, d]`.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags; `false` keys are never attended to.
    pub key_valid: Vec<bool>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && !(self.causal && j > i)
    }
}

/// Sliding-window unfolding over time for a strided 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub batch: usize,
    pub t_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Backward rule of a user-defined op: `(inputs, output, d_output) -> d_inputs`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<f64>),
    Reshape(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SumLastDim(Var),
    WeightedSum(Var, Vec<f64>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Box<AttentionSpec>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// One differentiation tape. Not `Send`-shared: build one graph per thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

fn out_shape_with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Var {
        if self.non_finite.is_none() && !all_finite(value.values()) {
            self.non_finite = Some(format!("{name} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Fails if any recorded value so far is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(at) => Err(Error::Numeric(format!("non-finite value produced by {at}"))),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be rank 2");
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(av.last_dim(), k, "matmul inner extent");
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.values(),
            false,
            bv.values(),
            false,
            &mut out,
            false,
        );
        let shape = out_shape_with_last(av.shape(), n);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::MatMul(a, b),
            ng,
            "matmul",
        )
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{name}: operand shapes differ");
        let vals = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), vals).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    /// `x[.., d] + bias[d]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        assert_eq!(bv.len(), d, "add_row: bias length");
        let mut vals = xv.values().to_vec();
        for row in vals.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bv.values()) {
                *v += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), vals).unwrap();
        let ng = self.ng(x) || self.ng(bias);
        self.push(t, Op::AddRow(x, bias), ng, "add_row")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Elementwise product with a fixed (non-differentiable) multiplier.
    pub fn mul_const(&mut self, x: Var, m: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), m.len(), "mul_const: multiplier length");
        let vals = xv.values().iter().zip(&m).map(|(a, b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), vals).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::MulConst(x, m), ng, "mul_const")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.values().iter().map(|v| v * s).collect(),
        )
        .unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.values().iter().map(|v| v + c).collect(),
        )
        .unwrap();
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng, "add_scalar")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.values().iter().map(|v| f(*v)).collect(),
        )
        .unwrap();
        let ng = self.ng(x);
        self.push(t, op, ng, name)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x), "log")
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x), "sqrt")
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor), "clamp_min")
    }

    /// Sum over the last extent: `[.., d] -> [..]` (a `[d]` input gives `[1]`).
    pub fn sum_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let vals: Vec<f64> = xv.values().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = xv.shape()[..xv.shape().len().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(shape, vals).unwrap(),
            Op::SumLastDim(x),
            ng,
            "sum_lastdim",
        )
    }

    /// Scalar `Σ w_i x_i` with fixed weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len(), "weighted_sum: weight length");
        let s = dot(xv.values(), &w);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::WeightedSum(x, w), ng, "weighted_sum")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0; n])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0 / n as f64; n])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut t = xv.clone();
        softmax_rows_in_place(t.values_mut(), xv.last_dim());
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng, "softmax")
    }

    /// Scalar `Σ_r w_r · (−log softmax(logits_r)[target_r])`.
    ///
    /// Rows with zero weight are skipped, so their target may be anything.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.rows();
        assert_eq!(targets.len(), rows, "cross_entropy: target count");
        assert_eq!(weights.len(), rows, "cross_entropy: weight count");
        let mut probs = lv.values().to_vec();
        softmax_rows_in_place(&mut probs, v);
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            assert!(t < v, "cross_entropy: target {t} outside vocabulary {v}");
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[t]);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
            "cross_entropy",
        )
    }

    /// Layer normalisation over the last extent with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        assert_eq!(gv.len(), d, "layer_norm: gamma length");
        assert_eq!(bv.len(), d, "layer_norm: beta length");
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.values()[c] + bv.values()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
            "layer_norm",
        )
    }

    /// Row lookup: `table[V, d]`, `ids[n]` → `[n, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.shape().len(), 2, "embedding table must be rank 2");
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding: id {id} outside vocabulary {vocab}");
            out.extend_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            Tensor::new(vec![ids.len(), d], out).unwrap(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
            "embedding",
        )
    }

    /// Unfolds `[batch * t_in, c]` into `[batch * t_out, kernel * c]` windows
    /// (zero padded), so a convolution becomes one matmul.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        assert_eq!(xv.rows(), geom.batch * geom.t_in, "im2col: row count");
        let t_out = geom.t_out();
        let width = geom.kernel * c;
        let mut out = vec![0.0; geom.batch * t_out * width];
        for b in 0..geom.batch {
            for t in 0..t_out {
                let dst = (b * t_out + t) * width;
                for kk in 0..geom.kernel {
                    let src_t = (t * geom.stride + kk) as isize - geom.pad as isize;
                    if src_t < 0 || src_t as usize >= geom.t_in {
                        continue;
                    }
                    let src = (b * geom.t_in + src_t as usize) * c;
                    out[dst + kk * c..dst + (kk + 1) * c]
                        .copy_from_slice(&xv.values()[src..src + c]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![geom.batch * t_out, width], out).unwrap(),
            Op::Im2Col { x, geom },
            ng,
            "im2col",
        )
    }

    /// Multi-head scaled dot-product attention with causal/padding masks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.last_dim();
        assert_eq!(kv.last_dim(), d, "attention: key width");
        assert_eq!(vv.last_dim(), d, "attention: value width");
        assert_eq!(qv.rows(), spec.batch * spec.q_len, "attention: query rows");
        assert_eq!(kv.rows(), spec.batch * spec.k_len, "attention: key rows");
        assert_eq!(vv.rows(), spec.batch * spec.k_len, "attention: value rows");
        assert_eq!(
            spec.key_valid.len(),
            spec.batch * spec.k_len,
            "attention: key mask"
        );
        assert!(
            spec.heads >= 1 && d % spec.heads == 0,
            "attention: heads must divide width"
        );
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (spec.q_len, spec.k_len);
        let mut probs = vec![0.0; spec.batch * spec.heads * tq * tk];
        let mut out = vec![0.0; qv.len()];
        let (qs, ks, vs) = (qv.values(), kv.values(), vv.values());
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..tq {
                    let p = &mut probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                    let qrow = &qs[(b * tq + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if spec.allowed(b, i, j) {
                            let s = dot(qrow, &ks[(b * tk + j) * d + off..][..dh]) * scale;
                            p[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut sum = 0.0;
                    for j in 0..tk {
                        if spec.allowed(b, i, j) {
                            p[j] = (p[j] - max).exp();
                            sum += p[j];
                        } else {
                            p[j] = 0.0;
                        }
                    }
                    let orow = &mut out[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        p[j] /= sum;
                        if p[j] != 0.0 {
                            axpy(p[j], &vs[(b * tk + j) * d + off..][..dh], orow);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out).unwrap();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec: Box::new(spec),
                probs,
            },
            ng,
            "attention",
        )
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        let n = self.value(x).len();
        let mask = dropout_mask(n, p, rng)?;
        if p == 0.0 {
            return Ok(x);
        }
        Ok(self.mul_const(x, mask))
    }

    /// Records an op whose value and backward rule are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let ng = inputs.iter().any(|v| self.ng(*v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
            "custom",
        )
    }

    /// Backpropagates from a scalar, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => axpy(1.0, &g, acc),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.values();
        let len = |v: Var| nodes[v.0].value.len();
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; len(v)]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let bt = &nodes[b.0].value;
                let (k, n) = (bt.shape()[0], bt.shape()[1]);
                let m = nodes[a.0].value.rows();
                with(*a, &mut |da| {
                    gemm(m, n, k, g, false, val(*b), true, da, true)
                });
                with(*b, &mut |db| {
                    gemm(k, m, n, val(*a), true, g, false, db, true)
                });
            }
            Op::Add(a, b) => {
                with(*a, &mut |da| axpy(1.0, g, da));
                with(*b, &mut |db| axpy(1.0, g, db));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |da| axpy(1.0, g, da));
                with(*b, &mut |db| axpy(-1.0, g, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with(*a, &mut |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                with(*b, &mut |db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with(*a, &mut |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi / y;
                    }
                });
                with(*b, &mut |db| {
                    for (((d, gi), x), y) in db.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gi * x / (y * y);
                    }
                });
            }
            Op::AddRow(x, bias) => {
                with(*x, &mut |dx| axpy(1.0, g, dx));
                with(*bias, &mut |db| {
                    let d = db.len();
                    for row in g.chunks(d) {
                        axpy(1.0, row, db);
                    }
                });
            }
            Op::MulConst(x, m) => with(*x, &mut |dx| {
                for ((d, gi), mi) in dx.iter_mut().zip(g).zip(m) {
                    *d += gi * mi;
                }
            }),
            Op::Reshape(x) => with(*x, &mut |dx| axpy(1.0, g, dx)),
            Op::Scale(x, s) => with(*x, &mut |dx| axpy(*s, g, dx)),
            Op::AddScalar(x) => with(*x, &mut |dx| axpy(1.0, g, dx)),
            Op::Relu(x) => {
                let xv = val(*x);
                with(*x, &mut |dx| {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.values();
                with(*x, &mut |dx| {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                with(*x, &mut |dx| {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi / xi;
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = node.value.values();
                with(*x, &mut |dx| {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * 0.5 / yi;
                    }
                });
            }
            Op::ClampMin(x, floor) => {
                let xv = val(*x);
                with(*x, &mut |dx| {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi > *floor {
                            *d += gi;
                        }
                    }
                });
            }
            Op::SumLastDim(x) => {
                let dim = nodes[x.0].value.last_dim();
                with(*x, &mut |dx| {
                    for (row, gi) in dx.chunks_mut(dim).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::WeightedSum(x, w) => with(*x, &mut |dx| axpy(g[0], w, dx)),
            Op::Softmax(x) => {
                let y = node.value.values();
                let dim = node.value.last_dim();
                with(*x, &mut |dx| {
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim))
                    {
                        let s = dot(grow, yrow);
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - s);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let v = nodes[logits.0].value.last_dim();
                with(*logits, &mut |dl| {
                    for (r, (w, t)) in weights.iter().zip(targets).enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        let row = &mut dl[r * v..(r + 1) * v];
                        axpy(s, &probs[r * v..(r + 1) * v], row);
                        row[*t] -= s;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let dim = gv.len();
                with(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((d, gi), hi) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gi * hi;
                        }
                    }
                });
                with(*beta, &mut |db| {
                    for grow in g.chunks(dim) {
                        axpy(1.0, grow, db);
                    }
                });
                with(*x, &mut |dx| {
                    let mut dh = vec![0.0; dim];
                    for (r, (drow, grow)) in dx.chunks_mut(dim).zip(g.chunks(dim)).enumerate() {
                        let hrow = &xhat[r * dim..(r + 1) * dim];
                        for c in 0..dim {
                            dh[c] = grow[c] * gv[c];
                        }
                        let m1 = dh.iter().sum::<f64>() / dim as f64;
                        let m2 = dot(&dh, hrow) / dim as f64;
                        for c in 0..dim {
                            drow[c] += inv_std[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.last_dim();
                with(*table, &mut |dt| {
                    for (r, id) in ids.iter().enumerate() {
                        axpy(
                            1.0,
                            &g[r * dim..(r + 1) * dim],
                            &mut dt[id * dim..(id + 1) * dim],
                        );
                    }
                });
            }
            Op::Im2Col { x, geom } => {
                let c = nodes[x.0].value.last_dim();
                let t_out = geom.t_out();
                let width = geom.kernel * c;
                with(*x, &mut |dx| {
                    for b in 0..geom.batch {
                        for t in 0..t_out {
                            let src = (b * t_out + t) * width;
                            for kk in 0..geom.kernel {
                                let xt = (t * geom.stride + kk) as isize - geom.pad as isize;
                                if xt < 0 || xt as usize >= geom.t_in {
                                    continue;
                                }
                                let dst = (b * geom.t_in + xt as usize) * c;
                                axpy(
                                    1.0,
                                    &g[src + kk * c..src + (kk + 1) * c],
                                    &mut dx[dst..dst + c],
                                );
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, adj);
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let grads = backward(&ins, &node.value, g);
                assert_eq!(grads.len(), inputs.len(), "custom backward: gradient count");
                for (v, gi) in inputs.iter().zip(grads) {
                    with(*v, &mut |dv| axpy(1.0, &gi, dv));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (qs, ks, vs) = (
            nodes[q.0].value.values(),
            nodes[k.0].value.values(),
            nodes[v.0].value.values(),
        );
        let d = nodes[q.0].value.last_dim();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (spec.q_len, spec.k_len);
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut ds = vec![0.0; tk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..tq {
                    let p = &probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                    let grow = &g[(b * tq + i) * d + off..][..dh];
                    let mut s = 0.0;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            ds[j] = 0.0;
                            continue;
                        }
                        let dp = dot(grow, &vs[(b * tk + j) * d + off..][..dh]);
                        ds[j] = dp;
                        s += p[j] * dp;
                    }
                    let qrow = &qs[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let dsj = p[j] * (ds[j] - s) * scale;
                        let kr = (b * tk + j) * d + off;
                        axpy(
                            dsj,
                            &ks[kr..kr + dh],
                            &mut dq[(b * tq + i) * d + off..][..dh],
                        );
                        axpy(dsj, qrow, &mut dk[kr..kr + dh]);
                        axpy(p[j], grow, &mut dv[kr..kr + dh]);
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !nodes[var.0].needs_grad {
                continue;
            }
            match &mut adj[var.0] {
                Some(acc) => axpy(1.0, &buf, acc),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}

/// `x * 0.0` is NaN exactly for non-finite `x`; summing in lanes keeps the loop vectorized.
fn all_finite(xs: &[f64]) -> bool {
    let mut acc = [0.0f64; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for k in 0..4 {
            acc[k] += c[k] * 0.0;
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|v| v * 0.0).sum();
    (acc[0] + acc[1] + acc[2] + acc[3] + tail) == 0.0
}
