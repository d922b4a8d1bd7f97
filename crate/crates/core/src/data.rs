//! Synthetic paired corpus of (pseudo-speech, transcript, translation).
//!
//! Token ids `0..3` are reserved for PAD, BOS and EOS; content tokens occupy
//! `3..vocab_size`. Pseudo-speech renders every transcript token as a fixed
//! random codebook frame repeated `frames_per_token` times, plus Gaussian noise.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NUM_SPECIALS: usize = 3;

/// Offset applied by [`Task::ShiftMap`], modulo the content vocabulary.
pub const SHIFT_OFFSET: usize = 5;

const CODEBOOK_STREAM: u64 = 0;
const ITEM_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Copy,
    Reverse,
    ShiftMap,
}

impl Task {
    /// Maps a transcript to its target. Ids must be content tokens.
    pub fn apply(self, src: &[usize], vocab_size: usize) -> Vec<usize> {
        let content = vocab_size - NUM_SPECIALS;
        match self {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
            Task::ShiftMap => src
                .iter()
                .map(|&t| NUM_SPECIALS + (t - NUM_SPECIALS + SHIFT_OFFSET) % content)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// Total vocabulary including the three specials.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub size: usize,
    pub frames_per_token: usize,
    pub frame_dim: usize,
    pub noise_sigma: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32 + NUM_SPECIALS,
            min_len: 3,
            max_len: 12,
            size: 2000,
            frames_per_token: 4,
            frame_dim: 16,
            noise_sigma: 0.1,
            task: Task::ShiftMap,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for content tokens after PAD/BOS/EOS",
                self.vocab_size
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.frames_per_token < 1 || self.frame_dim < 1 {
            return Err(Error::Config(
                "frames_per_token and frame_dim must be >= 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn content_vocab(&self) -> usize {
        self.vocab_size - NUM_SPECIALS
    }
}

/// One `(x_s, x_t, y)` example. Field names are the JSONL wire names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    /// `[T_s][frame_dim]` pseudo-speech frames.
    pub speech: Vec<Vec<f64>>,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub triples: Vec<Triple>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn split(&self, which: Split) -> Vec<&Triple> {
        self.triples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(t, _)| t)
            .collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 90/5/5 assignment from a hash of `(seed, index)`.
pub fn split_of(seed: u64, index: usize) -> Split {
    match splitmix64(splitmix64(seed) ^ index as u64) % 100 {
        0..=89 => Split::Train,
        90..=94 => Split::Dev,
        _ => Split::Test,
    }
}

/// Fixed per-token frame vectors, `content_vocab` rows of `frame_dim`.
pub fn codebook(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut g = RngStream::new(spec.seed, CODEBOOK_STREAM).generator_at(0);
    (0..spec.content_vocab())
        .map(|_| {
            (0..spec.frame_dim)
                .map(|_| g.sample(StandardNormal))
                .collect()
        })
        .collect()
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let book = codebook(spec);
    let items = RngStream::new(spec.seed, ITEM_STREAM);
    let content = spec.content_vocab();
    let mut triples = Vec::with_capacity(spec.size);
    let mut splits = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let mut g = items.generator_at(i as u64);
        let len = g.random_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| NUM_SPECIALS + g.random_range(0..content))
            .collect();
        let tgt = spec.task.apply(&src, spec.vocab_size);
        let mut speech = Vec::with_capacity(len * spec.frames_per_token);
        for &tok in &src {
            for _ in 0..spec.frames_per_token {
                let frame = book[tok - NUM_SPECIALS]
                    .iter()
                    .map(|c| {
                        if spec.noise_sigma > 0.0 {
                            let z: f64 = g.sample(StandardNormal);
                            c + spec.noise_sigma * z
                        } else {
                            *c
                        }
                    })
                    .collect();
                speech.push(frame);
            }
        }
        triples.push(Triple { speech, src, tgt });
        splits.push(split_of(spec.seed, i));
    }
    Ok(Corpus {
        spec: spec.clone(),
        triples,
        splits,
    })
}

pub fn write_jsonl<W: Write>(triples: &[Triple], mut out: W) -> Result<()> {
    for t in triples {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triple = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("corpus line {}: {e}", n + 1)))?;
        triples.push(t);
    }
    Ok(triples)
}

/// Padded, teacher-forcing-ready mini-batch; every id matrix is flattened
/// row-major `[size, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `[size, speech_len, frame_dim]`, zero at padded frames.
    pub speech: Tensor,
    pub speech_len: usize,
    pub speech_lens: Vec<usize>,
    pub transcript: Vec<usize>,
    pub transcript_len: usize,
    pub transcript_lens: Vec<usize>,
    /// BOS + target, padded.
    pub target_in: Vec<usize>,
    /// target + EOS, padded.
    pub target_out: Vec<usize>,
    pub target_len: usize,
    pub target_lens: Vec<usize>,
}

fn lens_to_mask(lens: &[usize], width: usize) -> Vec<bool> {
    lens.iter()
        .flat_map(|&l| (0..width).map(move |t| t < l))
        .collect()
}

impl Batch {
    pub fn from_triples(items: &[&Triple], pad_id: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let frame_dim = items[0].speech.first().map(Vec::len).unwrap_or(0);
        for t in items {
            if t.speech.is_empty() || t.src.is_empty() {
                return Err(Error::Data("zero-length speech or transcript".into()));
            }
            if t.speech.iter().any(|f| f.len() != frame_dim) {
                return Err(Error::Data("inconsistent frame width".into()));
            }
        }
        let size = items.len();
        let speech_lens: Vec<usize> = items.iter().map(|t| t.speech.len()).collect();
        let transcript_lens: Vec<usize> = items.iter().map(|t| t.src.len()).collect();
        let target_lens: Vec<usize> = items.iter().map(|t| t.tgt.len() + 1).collect();
        let speech_len = *speech_lens.iter().max().unwrap();
        let transcript_len = *transcript_lens.iter().max().unwrap();
        let target_len = *target_lens.iter().max().unwrap();

        let mut speech = vec![0.0; size * speech_len * frame_dim];
        let mut transcript = vec![pad_id; size * transcript_len];
        let mut target_in = vec![pad_id; size * target_len];
        let mut target_out = vec![pad_id; size * target_len];
        for (b, t) in items.iter().enumerate() {
            for (f, frame) in t.speech.iter().enumerate() {
                let at = (b * speech_len + f) * frame_dim;
                speech[at..at + frame_dim].copy_from_slice(frame);
            }
            transcript[b * transcript_len..][..t.src.len()].copy_from_slice(&t.src);
            let row_in = &mut target_in[b * target_len..][..t.tgt.len() + 1];
            row_in[0] = BOS;
            row_in[1..].copy_from_slice(&t.tgt);
            let row_out = &mut target_out[b * target_len..][..t.tgt.len() + 1];
            row_out[..t.tgt.len()].copy_from_slice(&t.tgt);
            row_out[t.tgt.len()] = EOS;
        }
        Ok(Self {
            size,
            speech: Tensor::new(vec![size, speech_len, frame_dim], speech)?,
            speech_len,
            speech_lens,
            transcript,
            transcript_len,
            transcript_lens,
            target_in,
            target_out,
            target_len,
            target_lens,
        })
    }

    pub fn frame_dim(&self) -> usize {
        self.speech.last_dim()
    }

    pub fn speech_mask(&self) -> Vec<bool> {
        lens_to_mask(&self.speech_lens, self.speech_len)
    }

    pub fn transcript_mask(&self) -> Vec<bool> {
        lens_to_mask(&self.transcript_lens, self.transcript_len)
    }

    pub fn target_mask(&self) -> Vec<bool> {
        lens_to_mask(&self.target_lens, self.target_len)
    }

    /// Padded speech-frame budget this batch occupies.
    pub fn token_count(&self) -> usize {
        self.size * self.speech_len
    }
}

/// Length-bucketed batches whose padded speech size `size * max T_s` stays
/// within `max_tokens`. Order is deterministic: ascending length, ties by index.
pub fn make_batches(triples: &[&Triple], max_tokens: usize, pad_id: usize) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.sort_by_key(|&i| (triples[i].speech.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<&Triple> = Vec::new();
    for i in order {
        let t = triples[i];
        let len = t.speech.len();
        if len > max_tokens {
            return Err(Error::Data(format!(
                "item {i} has {len} frames, more than max_tokens {max_tokens}"
            )));
        }
        if !current.is_empty() && (current.len() + 1) * len > max_tokens {
            batches.push(Batch::from_triples(&current, pad_id)?);
            current.clear();
        }
        current.push(t);
    }
    if !current.is_empty() {
        batches.push(Batch::from_triples(&current, pad_id)?);
    }
    Ok(batches)
}
