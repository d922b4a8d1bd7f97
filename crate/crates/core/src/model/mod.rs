//! Toy dual-input encoder-decoder.
//!
//! The speech branch runs strided convolutions over pseudo-speech frames, the
//! text branch embeds transcript ids; both feed the same pre-norm transformer
//! encoder and the same decoder. Every forward pass exposes five tap points.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, ConvGeometry, Graph, RngStream, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};

const LN_EPS: f64 = 1e-5;
const CONV_KERNEL: usize = 5;
const CONV_PAD: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub frame_dim: usize,
    pub subsample_stride: usize,
    pub subsample_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 35,
            d_model: 32,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 64,
            dropout: 0.1,
            frame_dim: 16,
            subsample_stride: 2,
            subsample_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ffn_dim", self.ffn_dim),
            ("frame_dim", self.frame_dim),
            ("subsample_stride", self.subsample_stride),
            ("subsample_layers", self.subsample_layers),
        ];
        for (name, v) in extents {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab_size must cover PAD/BOS/EOS".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Encoder length produced by the subsampler for `t_s` input frames.
    pub fn subsampled_len(&self, t_s: usize) -> usize {
        (0..self.subsample_layers).fold(t_s, |t, _| t.div_ceil(self.subsample_stride))
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    subsampler: Vec<Linear>,
    embed: usize,
    encoder: Vec<EncLayer>,
    enc_norm: Norm,
    decoder: Vec<DecLayer>,
    dec_norm: Norm,
    output: Linear,
}

struct Builder<'a> {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: &'a mut rand_chacha::ChaCha8Rng,
    bound: f64,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize]) -> usize {
        let n = shape.iter().product();
        let a = self.bound;
        let vals = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        self.add(name, Tensor::new(shape.to_vec(), vals).unwrap())
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.weight"), &[fan_in, fan_out]),
            b: self.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: self.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Model parameters registered on one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps vars already on a graph, in [`Model::param_names`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; parameters the loss never reached get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| g.grad(*v).unwrap_or_else(|| Tensor::zeros(g.shape(*v))))
            .collect()
    }
}

/// The five intermediate representations of one forward pass.
///
/// Rows are flattened `[batch * len]`; `enc_valid`/`dec_valid` flag real
/// (non-padding) positions.
#[derive(Debug, Clone)]
pub struct TapBundle {
    pub enc: Var,
    pub xattn: Var,
    pub lds: Var,
    pub logits: Var,
    pub softmax: Var,
    pub batch: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    pub enc_valid: Vec<bool>,
    pub dec_valid: Vec<bool>,
}

struct Dropper<'a> {
    rate: f64,
    rng: Option<&'a mut RngStream>,
}

impl Dropper<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = t as f64 / 10_000f64.powf(exponent);
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn row_mask_values(valid: &[bool], d: usize) -> Vec<f64> {
    valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, d))
        .collect()
}

fn lens_mask(lens: &[usize], width: usize) -> Vec<bool> {
    lens.iter()
        .flat_map(|&l| (0..width).map(move |t| t < l))
        .collect()
}

impl Model {
    pub fn build(config: &ModelConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut gen = rng.generator_at(0);
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: &mut gen,
            bound: 1.0 / (d as f64).sqrt(),
        };
        let mut subsampler = Vec::new();
        let mut c_in = config.frame_dim;
        for l in 0..config.subsample_layers {
            subsampler.push(b.linear(&format!("subsample.{l}"), CONV_KERNEL * c_in, d));
            c_in = d;
        }
        let embed = b.uniform("embed".into(), &[config.vocab_size, d]);
        let encoder = (0..config.enc_layers)
            .map(|l| EncLayer {
                ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln_ffn: b.norm(&format!("enc.{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let enc_norm = b.norm("enc.norm", d);
        let decoder = (0..config.dec_layers)
            .map(|l| DecLayer {
                ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                ln_ffn: b.norm(&format!("dec.{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let output = b.linear("output", d, config.vocab_size);
        let Builder { names, params, .. } = b;
        Ok(Self {
            config: config.clone(),
            names,
            params,
            layout: Layout {
                subsampler,
                embed,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
                output,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replaces all parameters; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape(
                "parameter set does not match model layout".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.leaf(p.clone())).collect(),
        }
    }

    /// Registers parameters as constants (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    fn linear(&self, g: &mut Graph, p: &BoundParams, l: Linear, x: Var) -> Var {
        let y = g.matmul(x, p.vars[l.w]);
        g.add_row(y, p.vars[l.b])
    }

    fn norm(&self, g: &mut Graph, p: &BoundParams, n: Norm, x: Var) -> Var {
        g.layer_norm(x, p.vars[n.gamma], p.vars[n.beta], LN_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        a: Attn,
        xq: Var,
        xkv: Var,
        spec: AttentionSpec,
    ) -> Var {
        let q = self.linear(g, p, a.q, xq);
        let k = self.linear(g, p, a.k, xkv);
        let v = self.linear(g, p, a.v, xkv);
        let o = g.attention(q, k, v, spec);
        self.linear(g, p, a.o, o)
    }

    fn ffn(&self, g: &mut Graph, p: &BoundParams, f: Ffn, x: Var) -> Var {
        let h = self.linear(g, p, f.up, x);
        let h = g.relu(h);
        self.linear(g, p, f.down, h)
    }

    fn add_positions(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Var {
        let d = self.config.d_model;
        let pe = sinusoidal_positions(len, d);
        let mut full = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            full.extend_from_slice(&pe);
        }
        let c = g.constant(Tensor::new(vec![batch * len, d], full).unwrap());
        g.add(x, c)
    }

    fn encode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        batch: usize,
        len: usize,
        valid: &[bool],
        drop: &mut Dropper,
    ) -> Result<Var> {
        let x = self.add_positions(g, x, batch, len);
        let mut x = drop.apply(g, x)?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, p, layer.ln_attn, x);
            let spec = AttentionSpec {
                batch,
                q_len: len,
                k_len: len,
                heads: self.config.n_heads,
                causal: false,
                key_valid: valid.to_vec(),
            };
            let a = self.mha(g, p, layer.attn, h, h, spec);
            let a = drop.apply(g, a)?;
            x = g.add(x, a);
            let h = self.norm(g, p, layer.ln_ffn, x);
            let f = self.ffn(g, p, layer.ffn, h);
            let f = drop.apply(g, f)?;
            x = g.add(x, f);
        }
        Ok(self.norm(g, p, self.layout.enc_norm, x))
    }

    fn speech_front(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        frames: &Tensor,
        lens: &[usize],
    ) -> Result<(Var, usize, Vec<usize>)> {
        let batch = frames.shape()[0];
        let mut t = frames.shape()[1];
        let mut lens = lens.to_vec();
        let flat = frames
            .clone()
            .reshape(vec![batch * t, self.config.frame_dim])?;
        let mut x = g.constant(flat);
        for conv in &self.layout.subsampler {
            let geom = ConvGeometry {
                batch,
                t_in: t,
                kernel: CONV_KERNEL,
                stride: self.config.subsample_stride,
                pad: CONV_PAD,
            };
            let cols = g.im2col(x, geom);
            let h = self.linear(g, p, *conv, cols);
            let h = g.relu(h);
            t = geom.t_out();
            for l in lens.iter_mut() {
                *l = l.div_ceil(self.config.subsample_stride);
            }
            let keep = row_mask_values(&lens_mask(&lens, t), self.config.d_model);
            x = g.mul_const(h, keep);
        }
        Ok((x, t, lens))
    }

    fn embed_ids(&self, g: &mut Graph, p: &BoundParams, ids: &[usize]) -> Var {
        let e = g.embedding(p.vars[self.layout.embed], ids);
        g.scale(e, (self.config.d_model as f64).sqrt())
    }

    /// Shared decoder; returns `(xattn, lds, logits)` taps.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        target_in: &[usize],
        batch: usize,
        t_dec: usize,
        dec_valid: &[bool],
        enc: Var,
        t_enc: usize,
        enc_valid: &[bool],
        drop: &mut Dropper,
    ) -> Result<(Var, Var, Var)> {
        let x = self.embed_ids(g, p, target_in);
        let x = self.add_positions(g, x, batch, t_dec);
        let mut x = drop.apply(g, x)?;
        let mut xattn = x;
        for layer in &self.layout.decoder {
            let h = self.norm(g, p, layer.ln_self, x);
            let spec = AttentionSpec {
                batch,
                q_len: t_dec,
                k_len: t_dec,
                heads: self.config.n_heads,
                causal: true,
                key_valid: dec_valid.to_vec(),
            };
            let a = self.mha(g, p, layer.self_attn, h, h, spec);
            let a = drop.apply(g, a)?;
            x = g.add(x, a);

            let h = self.norm(g, p, layer.ln_cross, x);
            let spec = AttentionSpec {
                batch,
                q_len: t_dec,
                k_len: t_enc,
                heads: self.config.n_heads,
                causal: false,
                key_valid: enc_valid.to_vec(),
            };
            let c = self.mha(g, p, layer.cross_attn, h, enc, spec);
            let c = drop.apply(g, c)?;
            x = g.add(x, c);
            xattn = x;

            let h = self.norm(g, p, layer.ln_ffn, x);
            let f = self.ffn(g, p, layer.ffn, h);
            let f = drop.apply(g, f)?;
            x = g.add(x, f);
        }
        let lds = self.norm(g, p, self.layout.dec_norm, x);
        let logits = self.linear(g, p, self.layout.output, lds);
        Ok((xattn, lds, logits))
    }

    fn dropper<'a>(&self, rng: &'a mut RngStream, dropout_on: bool) -> Dropper<'a> {
        Dropper {
            rate: self.config.dropout,
            rng: if dropout_on { Some(rng) } else { None },
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.size == 0
            || batch.speech_lens.contains(&0)
            || batch.transcript_lens.contains(&0)
            || batch.target_lens.contains(&0)
        {
            return Err(Error::Usage("zero-length sequence in batch".into()));
        }
        if batch.frame_dim() != self.config.frame_dim {
            return Err(Error::Usage(format!(
                "frame width {} but model expects {}",
                batch.frame_dim(),
                self.config.frame_dim
            )));
        }
        let v = self.config.vocab_size;
        if batch
            .transcript
            .iter()
            .chain(&batch.target_in)
            .chain(&batch.target_out)
            .any(|&id| id >= v)
        {
            return Err(Error::Usage(format!("token id outside vocabulary {v}")));
        }
        Ok(())
    }

    fn finish(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
        enc: Var,
        t_enc: usize,
        enc_valid: Vec<bool>,
        drop: &mut Dropper,
    ) -> Result<TapBundle> {
        let dec_valid = batch.target_mask();
        let (xattn, lds, logits) = self.decode(
            g,
            p,
            &batch.target_in,
            batch.size,
            batch.target_len,
            &dec_valid,
            enc,
            t_enc,
            &enc_valid,
            drop,
        )?;
        let softmax = g.softmax(logits);
        Ok(TapBundle {
            enc,
            xattn,
            lds,
            logits,
            softmax,
            batch: batch.size,
            enc_len: t_enc,
            dec_len: batch.target_len,
            enc_valid,
            dec_valid,
        })
    }

    /// Speech branch: subsampler → shared encoder → shared decoder (teacher forced).
    pub fn forward_speech(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
        rng: &mut RngStream,
        dropout_on: bool,
    ) -> Result<TapBundle> {
        self.check_batch(batch)?;
        let mut drop = self.dropper(rng, dropout_on);
        let (x, t_enc, lens) = self.speech_front(g, p, &batch.speech, &batch.speech_lens)?;
        let enc_valid = lens_mask(&lens, t_enc);
        let enc = self.encode(g, p, x, batch.size, t_enc, &enc_valid, &mut drop)?;
        self.finish(g, p, batch, enc, t_enc, enc_valid, &mut drop)
    }

    /// Text branch: transcript embeddings → shared encoder → shared decoder.
    pub fn forward_text(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
        rng: &mut RngStream,
        dropout_on: bool,
    ) -> Result<TapBundle> {
        self.check_batch(batch)?;
        let mut drop = self.dropper(rng, dropout_on);
        let x = self.embed_ids(g, p, &batch.transcript);
        let enc_valid = batch.transcript_mask();
        let t_enc = batch.transcript_len;
        let enc = self.encode(g, p, x, batch.size, t_enc, &enc_valid, &mut drop)?;
        self.finish(g, p, batch, enc, t_enc, enc_valid, &mut drop)
    }

    /// Argmax decoding for a padded batch of speech inputs, dropout off.
    /// Each output excludes EOS and has at most `max_len` tokens.
    pub fn greedy_decode_batch(
        &self,
        frames: &Tensor,
        lens: &[usize],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if frames.shape().len() != 3 || frames.shape()[0] != lens.len() {
            return Err(Error::Usage(
                "frames must be [batch, time, frame_dim]".into(),
            ));
        }
        if frames.shape()[2] != self.config.frame_dim {
            return Err(Error::Usage("frame width does not match model".into()));
        }
        if lens.contains(&0) || lens.iter().any(|l| *l > frames.shape()[1]) {
            return Err(Error::Usage("invalid speech lengths".into()));
        }
        let batch = lens.len();
        let (enc_value, t_enc, enc_lens) = {
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let (x, t_enc, enc_lens) = self.speech_front(&mut g, &p, frames, lens)?;
            let enc_valid = lens_mask(&enc_lens, t_enc);
            let mut drop = Dropper {
                rate: 0.0,
                rng: None,
            };
            let enc = self.encode(&mut g, &p, x, batch, t_enc, &enc_valid, &mut drop)?;
            (g.value(enc).clone(), t_enc, enc_lens)
        };
        let enc_valid = lens_mask(&enc_lens, t_enc);
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        for step in 0..max_len {
            if done.iter().all(|d| *d) {
                break;
            }
            let t_dec = step + 1;
            let mut ids = Vec::with_capacity(batch * t_dec);
            for seq in &out {
                ids.push(BOS);
                ids.extend(seq.iter().copied());
                ids.resize(ids.len() + (t_dec - 1 - seq.len()), PAD);
            }
            let dec_valid = vec![true; batch * t_dec];
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let enc = g.constant(enc_value.clone());
            let mut drop = Dropper {
                rate: 0.0,
                rng: None,
            };
            let (_, _, logits) = self.decode(
                &mut g, &p, &ids, batch, t_dec, &dec_valid, enc, t_enc, &enc_valid, &mut drop,
            )?;
            let lv = g.value(logits);
            for b in 0..batch {
                if done[b] {
                    continue;
                }
                let row = lv.row(b * t_dec + step);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                if best == EOS {
                    done[b] = true;
                } else {
                    out[b].push(best);
                }
            }
        }
        Ok(out)
    }

    pub fn greedy_decode(&self, speech_frames: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        if speech_frames.shape().len() != 2 {
            return Err(Error::Usage(
                "speech frames must be [time, frame_dim]".into(),
            ));
        }
        let t = speech_frames.shape()[0];
        let f = speech_frames.shape()[1];
        let frames = speech_frames.clone().reshape(vec![1, t, f])?;
        Ok(self.greedy_decode_batch(&frames, &[t], max_len)?.remove(0))
    }
}
