//! Repeated random-token benchmark sequences.
//!
//! Tokens come from ChaCha8 seeded with `seed` through `u64` seeding, and are
//! drawn with `rand`'s portable uniform integer sampler over `u32`, so a
//! `(t0, batch, vocab, seed)` tuple yields the same batch on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub t0: usize,
    pub vocab: usize,
    pub seed: u64,
    pub tokens: Vec<Vec<u32>>,
}

impl SequenceBatch {
    pub fn seq_len(&self) -> usize {
        2 * self.t0
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.len()
    }

    /// Checks shape, repetition and vocabulary bounds, e.g. after reading JSON.
    pub fn validate(&self) -> Result<()> {
        if self.t0 < 2 || self.vocab < 2 {
            return Err(ProbeError::Input("sequence batch needs t0 >= 2 and vocab >= 2".into()));
        }
        if self.tokens.is_empty() {
            return Err(ProbeError::Input("sequence batch is empty".into()));
        }
        for (b, seq) in self.tokens.iter().enumerate() {
            if seq.len() != self.seq_len() {
                return Err(ProbeError::Input(format!(
                    "sequence {b} has length {}, expected {}",
                    seq.len(),
                    self.seq_len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(ProbeError::Input(format!("sequence {b} holds token {bad} >= vocab {}", self.vocab)));
            }
            if seq[..self.t0] != seq[self.t0..] {
                return Err(ProbeError::Input(format!("sequence {b} is not a repeated subsequence")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let batch: Self = serde_json::from_str(s)?;
        batch.validate()?;
        Ok(batch)
    }
}

/// `batch` sequences, each a uniform random subsequence of length `t0`
/// followed by an exact copy of itself.
pub fn gen_repeated(t0: usize, batch: usize, vocab: usize, seed: u64) -> Result<SequenceBatch> {
    if t0 < 2 || vocab < 2 || batch == 0 {
        return Err(ProbeError::Input(format!(
            "need t0 >= 2, vocab >= 2, batch >= 1 (got t0={t0}, vocab={vocab}, batch={batch})"
        )));
    }
    let vocab_u32 = u32::try_from(vocab)
        .map_err(|_| ProbeError::Input(format!("vocab {vocab} exceeds u32 token ids")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..batch)
        .map(|_| {
            let half: Vec<u32> = (0..t0).map(|_| rng.random_range(0..vocab_u32)).collect();
            let mut seq = half.clone();
            seq.extend_from_slice(&half);
            seq
        })
        .collect();
    Ok(SequenceBatch {
        t0,
        vocab,
        seed,
        tokens,
    })
}
