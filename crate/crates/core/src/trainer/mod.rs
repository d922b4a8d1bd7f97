//! A single training run: schedule, Adam loop, dev tracking, early stopping,
//! checkpoint averaging and the resulting [`RunRecord`].

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_batches, Batch, Corpus, CorpusSpec, Split, Triple, PAD};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, total_loss, LossWeights, PassStreams};
use crate::model::{BoundParams, Model, ModelConfig};
use crate::numerics::{Adam, AdamConfig, Graph, RngStream, Tensor, Var};

/// Stream ids under the run seed. Dropout streams come from
/// [`PassStreams::for_step`] with steps ≥ 1, i.e. stream ids ≥ 3.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const WARM_START_SEED_XOR: u64 = 0x5741_524d;

/// Extra decode steps allowed beyond the transcript length.
pub const DECODE_MARGIN: usize = 4;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub dropout: f64,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Evaluations without strict dev improvement before stopping.
    pub patience: usize,
    pub eval_every: u64,
    pub seed: u64,
    /// Padded speech-frame budget per batch.
    pub max_tokens: usize,
    /// MT-only steps before the main phase; 0 disables warm start.
    pub warm_start_steps: u64,
    /// Number of trailing checkpoints averaged into the final model.
    pub avg_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            dropout: 0.1,
            max_lr: 1e-3,
            warmup_steps: 200,
            max_steps: 5000,
            patience: 10,
            eval_every: 100,
            seed: 0,
            max_tokens: 512,
            warm_start_steps: 0,
            avg_checkpoints: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!(
                "max_lr must be positive, got {}",
                self.max_lr
            )));
        }
        for (name, v) in [
            ("warmup_steps", self.warmup_steps),
            ("max_steps", self.max_steps),
            ("eval_every", self.eval_every),
            ("patience", self.patience as u64),
            ("max_tokens", self.max_tokens as u64),
            ("avg_checkpoints", self.avg_checkpoints as u64),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup.
pub fn lr_at(step: u64, max_lr: f64, warmup: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    max_lr * (s / w).min((w / s).sqrt())
}

/// Stops after `patience` consecutive evaluations without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one evaluation; returns `true` when training should stop.
    pub fn observe(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric <= b => self.stale += 1,
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }
}

/// Keeps the last `capacity` parameter snapshots.
#[derive(Debug, Clone)]
pub struct CheckpointWindow {
    capacity: usize,
    snapshots: VecDeque<Vec<Tensor>>,
}

impl CheckpointWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            snapshots: VecDeque::new(),
        }
    }

    pub fn push(&mut self, params: &[Tensor]) {
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(params.to_vec());
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Element-wise running mean of the retained snapshots.
    pub fn average(&self) -> Option<Vec<Tensor>> {
        let mut iter = self.snapshots.iter();
        let mut mean = iter.next()?.clone();
        for (n, snap) in iter.enumerate() {
            let k = (n + 2) as f64;
            for (m, s) in mean.iter_mut().zip(snap) {
                for (a, b) in m.values_mut().iter_mut().zip(s.values()) {
                    *a += (b - *a) / k;
                }
            }
        }
        Some(mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// `Σ correct / Σ max(len_hyp, len_ref)` over the split.
    pub token_accuracy: f64,
    pub exact_match: f64,
    /// Per-item `correct / max(len_hyp, len_ref)`, in split order.
    pub item_scores: Vec<f64>,
}

/// Positions where hypothesis and reference agree, and the penalized length.
pub fn score_sequence(hyp: &[usize], reference: &[usize]) -> (usize, usize) {
    let correct = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    (correct, hyp.len().max(reference.len()))
}

/// Greedy-decodes each item from speech and scores it against its target.
pub fn evaluate(model: &Model, items: &[&Triple]) -> Result<EvalResult> {
    if items.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| (items[i].speech.len(), i));
    let mut hyps: Vec<Vec<usize>> = vec![Vec::new(); items.len()];
    for chunk in order.chunks(EVAL_BATCH) {
        let refs: Vec<&Triple> = chunk.iter().map(|&i| items[i]).collect();
        let batch = Batch::from_triples(&refs, PAD)?;
        let max_len = batch.transcript_len + DECODE_MARGIN;
        let out = model.greedy_decode_batch(&batch.speech, &batch.speech_lens, max_len)?;
        for (&i, h) in chunk.iter().zip(out) {
            hyps[i] = h;
        }
    }
    let (mut correct, mut total, mut exact) = (0usize, 0usize, 0usize);
    let mut item_scores = Vec::with_capacity(items.len());
    for (hyp, item) in hyps.iter().zip(items) {
        let (c, n) = score_sequence(hyp, &item.tgt);
        correct += c;
        total += n;
        exact += usize::from(hyp == &item.tgt);
        item_scores.push(if n == 0 { 1.0 } else { c as f64 / n as f64 });
    }
    Ok(EvalResult {
        token_accuracy: if total == 0 {
            1.0
        } else {
            correct as f64 / total as f64
        },
        exact_match: exact as f64 / items.len() as f64,
        item_scores,
    })
}

/// One hyperparameter point and its outcome; one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub alpha_cr: f64,
    pub alpha_rd: f64,
    pub alpha_t: f64,
    pub dropout: f64,
    pub dev_metric: f64,
    pub test_metric: f64,
    /// `(step, dev token accuracy)` at every evaluation.
    pub curve: Vec<(u64, f64)>,
    pub seed: u64,
    pub config_hash: String,
    pub failed: bool,
}

pub fn write_records<W: Write>(records: &[RunRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("record line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// SHA-256 over the canonical JSON of everything that determines a run.
pub fn config_hash(model: &ModelConfig, corpus: &CorpusSpec, train: &TrainConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a ModelConfig,
        corpus: &'a CorpusSpec,
        train: &'a TrainConfig,
    }
    let bytes = serde_json::to_vec(&Key {
        model,
        corpus,
        train,
    })
    .expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    /// The checkpoint-averaged final model.
    pub model: Model,
    pub dev: Option<EvalResult>,
    pub test: Option<EvalResult>,
    /// Total loss of every main-phase step taken.
    pub train_losses: Vec<f64>,
    pub steps: u64,
}

/// The three splits a run consumes.
#[derive(Debug, Clone, Copy)]
pub struct RunData<'a> {
    pub train: &'a [&'a Triple],
    pub dev: &'a [&'a Triple],
    pub test: &'a [&'a Triple],
}

/// Trains on the corpus's train split, tracking the dev split.
pub fn train_run(
    model_config: &ModelConfig,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<RunOutcome> {
    let (train, dev, test) = (
        corpus.split(Split::Train),
        corpus.split(Split::Dev),
        corpus.split(Split::Test),
    );
    let hash = config_hash(model_config, &corpus.spec, config);
    train_on(
        model_config,
        RunData {
            train: &train,
            dev: &dev,
            test: &test,
        },
        config,
        hash,
    )
}

struct BatchCycle {
    order: Vec<usize>,
    pos: usize,
    rng: RngStream,
}

impl BatchCycle {
    fn new(n: usize, rng: RngStream) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng.next_generator());
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn failed_record(
    config: &TrainConfig,
    hash: String,
    mut curve: Vec<(u64, f64)>,
    step: u64,
) -> RunRecord {
    if curve.is_empty() {
        curve.push((step, 0.0));
    }
    RunRecord {
        alpha_cr: config.weights.alpha_cr,
        alpha_rd: config.weights.alpha_rd,
        alpha_t: config.weights.alpha_t,
        dropout: config.dropout,
        dev_metric: 0.0,
        test_metric: 0.0,
        curve,
        seed: config.seed,
        config_hash: hash,
        failed: true,
    }
}

fn apply_step(
    model: &mut Model,
    adam: &mut Adam,
    g: &mut Graph,
    p: &BoundParams,
    loss: Var,
    lr: f64,
) -> Result<()> {
    g.backward(loss)?;
    let grads = p.grads(g);
    adam.step(model.params_mut(), &grads, lr)
}

/// MT-only pretraining of the shared encoder/decoder on the text branch.
fn warm_start(model: &mut Model, batches: &[Batch], config: &TrainConfig) -> Result<()> {
    let seed = config.seed ^ WARM_START_SEED_XOR;
    let mut adam = Adam::new(AdamConfig::default());
    let mut cycle = BatchCycle::new(batches.len(), RngStream::new(seed, SHUFFLE_STREAM));
    for step in 1..=config.warm_start_steps {
        let batch = &batches[cycle.next()];
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let mut rng = PassStreams::for_step(seed, step).text;
        let text = model.forward_text(&mut g, &p, batch, &mut rng, true)?;
        let loss = ce_loss(&mut g, &text, &batch.target_out, &batch.target_lens)?;
        let lr = lr_at(step, config.max_lr, config.warmup_steps);
        apply_step(model, &mut adam, &mut g, &p, loss, lr)?;
    }
    Ok(())
}

/// Trains on explicit splits. `config_hash` is copied into the record.
pub fn train_on(
    model_config: &ModelConfig,
    data: RunData<'_>,
    config: &TrainConfig,
    config_hash: String,
) -> Result<RunOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Data("train and dev splits must be non-empty".into()));
    }
    let mc = ModelConfig {
        dropout: config.dropout,
        ..model_config.clone()
    };
    let mut model = Model::build(&mc, &RngStream::new(config.seed, INIT_STREAM))?;
    let batches = make_batches(data.train, config.max_tokens, PAD)?;

    if config.warm_start_steps > 0 {
        if let Err(e) = warm_start(&mut model, &batches, config) {
            return match e {
                Error::Numeric(_) => Ok(RunOutcome {
                    record: failed_record(config, config_hash, Vec::new(), 0),
                    model,
                    dev: None,
                    test: None,
                    train_losses: Vec::new(),
                    steps: 0,
                }),
                other => Err(other),
            };
        }
    }

    let mut adam = Adam::new(AdamConfig::default());
    let mut cycle = BatchCycle::new(batches.len(), RngStream::new(config.seed, SHUFFLE_STREAM));
    let mut stopper = EarlyStopper::new(config.patience);
    let mut window = CheckpointWindow::new(config.avg_checkpoints);
    let mut curve = Vec::new();
    let mut train_losses = Vec::new();
    let mut steps = 0;

    for step in 1..=config.max_steps {
        steps = step;
        let batch = &batches[cycle.next()];
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let streams = PassStreams::for_step(config.seed, step);
        let outcome = total_loss(&mut g, &p, &model, batch, &config.weights, &streams, true)
            .and_then(|loss| {
                let lr = lr_at(step, config.max_lr, config.warmup_steps);
                apply_step(&mut model, &mut adam, &mut g, &p, loss.total, lr)?;
                Ok(loss.breakdown.total)
            });
        match outcome {
            Ok(total) if total.is_finite() => train_losses.push(total),
            Ok(_) | Err(Error::Numeric(_)) => {
                return Ok(RunOutcome {
                    record: failed_record(config, config_hash, curve, step),
                    model,
                    dev: None,
                    test: None,
                    train_losses,
                    steps,
                });
            }
            Err(e) => return Err(e),
        }

        if step % config.eval_every == 0 {
            let dev = evaluate(&model, data.dev)?;
            curve.push((step, dev.token_accuracy));
            window.push(model.params());
            if stopper.observe(dev.token_accuracy) {
                break;
            }
        }
    }

    if let Some(avg) = window.average() {
        model.set_params(avg)?;
    }
    let dev = evaluate(&model, data.dev)?;
    if curve.is_empty() {
        curve.push((steps, dev.token_accuracy));
    }
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, data.test)?)
    };
    let record = RunRecord {
        alpha_cr: config.weights.alpha_cr,
        alpha_rd: config.weights.alpha_rd,
        alpha_t: config.weights.alpha_t,
        dropout: config.dropout,
        dev_metric: dev.token_accuracy,
        test_metric: test.as_ref().map_or(0.0, |t| t.token_accuracy),
        curve,
        seed: config.seed,
        config_hash,
        failed: false,
    };
    Ok(RunOutcome {
        record,
        model,
        dev: Some(dev),
        test,
        train_losses,
        steps,
    })
}
