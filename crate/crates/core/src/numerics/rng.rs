use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Words reserved per call inside one ChaCha stream.
const WORDS_PER_CALL_SHIFT: u32 = 36;

/// Counter-based randomness keyed by `(seed, stream, call index)`.
///
/// Every call to [`RngStream::next_generator`] returns a generator positioned
/// at a fresh, non-overlapping window of the ChaCha8 keystream, so the draws
/// of call `k` do not depend on how many values earlier calls consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    calls: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            calls: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn call_index(&self) -> u64 {
        self.calls
    }

    /// Same seed, different stream id, call counter reset.
    pub fn substream(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn generator_at(&self, call: u64) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        g.set_stream(self.stream);
        g.set_word_pos((call as u128) << WORDS_PER_CALL_SHIFT);
        g
    }

    pub fn next_generator(&mut self) -> ChaCha8Rng {
        let g = self.generator_at(self.calls);
        self.calls += 1;
        g
    }
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    let mut g = rng.next_generator();
    if p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if g.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub fn dropout(x: &Tensor, p: f64, rng: &mut RngStream) -> Result<Tensor> {
    let mask = dropout_mask(x.len(), p, rng)?;
    if p == 0.0 {
        return Ok(x.clone());
    }
    let values = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), values)
}
