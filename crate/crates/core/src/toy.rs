//! Hand-wired two-block attention-only induction circuit.
//!
//! The residual stream is split into three blocks: token identity, one-hot
//! position, and a scratch block of the same width as the token block.
//!
//! * Block 1 (previous-token head): queries read the position block, keys
//!   read the position block shifted by one, so position `p` attends to
//!   `p − 1`. The value copies the token block into the scratch block.
//! * Block 2 (induction head): queries read the token block, keys read the
//!   scratch block (the previous token's identity), so a query token matches
//!   the position right after its earlier occurrence. The value copies that
//!   position's token block back into the token block, scaled by
//!   `copy_gain`.
//!
//! Norms are identity so the construction is exact linear algebra apart from
//! the softmax. Position 0 has no predecessor and attends to itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::model::{Activation, Model, ModelConfig, ModelWeights, NormKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 30.0;
pub const DEFAULT_COPY_GAIN: f64 = 1.0;
pub const DEFAULT_VOCAB: usize = 4096;
pub const GAUSSIAN_TOKEN_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenVectors {
    /// `d_tok = vocab`, exactly orthogonal tokens.
    OneHot,
    /// Seeded unit-Gaussian draws normalized to unit length.
    Gaussian { dim: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub vocab: usize,
    pub max_context: usize,
    /// Softmax score scale of both heads.
    pub beta: f64,
    pub copy_gain: f64,
    pub tokens: TokenVectors,
}

impl ToyParams {
    /// Gaussian token vectors of width [`GAUSSIAN_TOKEN_DIM`], seed 0.
    pub fn new(vocab: usize, max_context: usize, beta: f64, copy_gain: f64) -> Self {
        Self {
            vocab,
            max_context,
            beta,
            copy_gain,
            tokens: TokenVectors::Gaussian {
                dim: GAUSSIAN_TOKEN_DIM,
                seed: 0,
            },
        }
    }

    /// Exactly orthogonal one-hot tokens, `d_tok = vocab`.
    pub fn one_hot(vocab: usize, max_context: usize, beta: f64, copy_gain: f64) -> Self {
        Self {
            tokens: TokenVectors::OneHot,
            ..Self::new(vocab, max_context, beta, copy_gain)
        }
    }

    pub fn token_dim(&self) -> usize {
        match self.tokens {
            TokenVectors::OneHot => self.vocab,
            TokenVectors::Gaussian { dim, .. } => dim,
        }
    }

    /// `(d_tok, d_pos, d_scratch)`.
    pub fn split(&self) -> (usize, usize, usize) {
        let d_tok = self.token_dim();
        (d_tok, self.max_context, d_tok)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.max_context < 2 {
            return Err(ProbeError::Config("toy model needs vocab >= 2 and max_context >= 2".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(ProbeError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.copy_gain.is_finite() && self.copy_gain >= 0.0) {
            return Err(ProbeError::Config(format!(
                "copy_gain must be non-negative, got {}",
                self.copy_gain
            )));
        }
        if self.token_dim() == 0 {
            return Err(ProbeError::Config("token subspace must be non-empty".into()));
        }
        Ok(())
    }
}

fn token_table(params: &ToyParams) -> Vec<Vec<f64>> {
    match params.tokens {
        TokenVectors::OneHot => (0..params.vocab)
            .map(|v| {
                let mut e = vec![0.0; params.vocab];
                e[v] = 1.0;
                e
            })
            .collect(),
        TokenVectors::Gaussian { dim, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..params.vocab)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        }
    }
}

pub fn build_toy_induction<S: Scalar>(params: &ToyParams) -> Result<(ModelConfig, ModelWeights<S>)> {
    params.validate()?;
    let (d_tok, d_pos, d_scr) = params.split();
    let d = d_tok + d_pos + d_scr;
    let (pos0, scr0) = (d_tok, d_tok + d_pos);
    let config = ModelConfig {
        n_layers: 2,
        d_model: d,
        n_heads: 1,
        d_head: d,
        d_mlp: 0,
        vocab_size: params.vocab,
        max_context: params.max_context,
        has_mlp: false,
        final_norm: false,
        norm: NormKind::Identity,
        activation: Activation::GeluErf,
    };
    let mut w = ModelWeights::<S>::zeros(&config);

    for (v, vec) in token_table(params).iter().enumerate() {
        for (k, x) in vec.iter().enumerate() {
            w.token_embedding.row_mut(v)[k] = S::from_f64_lossy(*x);
        }
    }
    for p in 0..d_pos {
        w.positional_embedding.row_mut(p)[pos0 + p] = S::one();
    }

    // the engine divides scores by sqrt(d_head); fold that back into queries
    let q_scale = S::from_f64_lossy(params.beta * (d as f64).sqrt());
    let set = |t: &mut Tensor<S>, r: usize, c: usize, v: S| t.row_mut(r)[c] = v;

    let prev = &mut w.layers[0];
    for a in 0..d_pos {
        set(&mut prev.w_q, pos0 + a, pos0 + a, q_scale);
        if a + 1 < d_pos {
            set(&mut prev.w_k, pos0 + a + 1, pos0 + a, S::one());
        }
    }
    for t in 0..d_tok {
        set(&mut prev.w_v, scr0 + t, t, S::one());
        set(&mut prev.w_o, scr0 + t, scr0 + t, S::one());
    }

    let induction = &mut w.layers[1];
    let gain = S::from_f64_lossy(params.copy_gain);
    for t in 0..d_tok {
        set(&mut induction.w_q, t, t, q_scale);
        set(&mut induction.w_k, t, scr0 + t, S::one());
        set(&mut induction.w_v, t, t, S::one());
        set(&mut induction.w_o, t, t, gain);
    }
    Ok((config, w))
}

/// Convenience wrapper returning a validated [`Model`].
pub fn toy_model<S: Scalar>(params: &ToyParams) -> Result<Model<S>> {
    let (config, weights) = build_toy_induction(params)?;
    Model::new(config, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ToyParams {
        ToyParams::new(16, 24, 30.0, 1.0)
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = params();
        p.beta = 0.0;
        assert!(matches!(build_toy_induction::<f32>(&p), Err(ProbeError::Config(_))));
        let mut p = params();
        p.copy_gain = -1.0;
        assert!(build_toy_induction::<f32>(&p).is_err());
        let mut p = params();
        p.tokens = TokenVectors::Gaussian { dim: 0, seed: 1 };
        assert!(build_toy_induction::<f32>(&p).is_err());
    }

    #[test]
    fn previous_token_head_pattern() {
        for beta in [20.0, 30.0] {
            let p = ToyParams::new(16, 24, beta, 1.0);
            let model: Model<f64> = toy_model(&p).unwrap();
            let tokens: Vec<u32> = (0..20).map(|i| (i * 7 % 16) as u32).collect();
            let pats = model.attention_patterns(&model.embed(&tokens).unwrap()).unwrap();
            let l1 = &pats[0][0];
            assert_eq!(l1.get2(0, 0), 1.0);
            for row in 1..tokens.len() {
                assert!(l1.get2(row, row - 1) >= 0.99, "row {row}");
            }
        }
    }

    #[test]
    fn induction_head_pattern_on_repeat() {
        for p in [params(), ToyParams::one_hot(16, 24, 30.0, 1.0)] {
            induction_pattern(&p);
        }
    }

    fn induction_pattern(p: &ToyParams) {
        let model: Model<f64> = toy_model(p).unwrap();
        let t0 = 10;
        let s: Vec<u32> = vec![3, 9, 1, 14, 0, 7, 12, 5, 2, 11];
        let tokens: Vec<u32> = s.iter().chain(&s).copied().collect();
        let pats = model.attention_patterns(&model.embed(&tokens).unwrap()).unwrap();
        let l2 = &pats[1][0];
        // position 0 holds its own token in scratch, so the first query ties
        // between offsets 0 and 1
        let first = l2.row(t0);
        assert!((first[0] - 0.5).abs() < 1e-9 && (first[1] - 0.5).abs() < 1e-9);
        for i in 1..t0 - 1 {
            let row = l2.row(i + t0);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(row[i + 1], max, "query {}", i + t0);
            assert!(row[i + 1] > 0.99);
        }
    }

    #[test]
    fn zero_copy_gain_leaves_block_two_inert() {
        let mut p = params();
        p.copy_gain = 0.0;
        let model: Model<f32> = toy_model(&p).unwrap();
        let tokens: Vec<u32> = vec![1, 2, 3, 1, 2, 3];
        let trace = model.forward_with_trace(&tokens).unwrap();
        assert_eq!(trace.states[4], trace.states[2]);
        assert_eq!(trace.states[2], trace.states[1]);
        assert_ne!(trace.states[1], trace.states[0]);
    }

    #[test]
    fn gaussian_tokens_are_seeded_and_unit_norm() {
        let mut p = ToyParams::new(600, 8, 30.0, 1.0);
        assert_eq!(p.tokens, TokenVectors::Gaussian { dim: GAUSSIAN_TOKEN_DIM, seed: 0 });
        p.tokens = TokenVectors::Gaussian { dim: 32, seed: 5 };
        let (_, a) = build_toy_induction::<f32>(&p).unwrap();
        let (_, b) = build_toy_induction::<f32>(&p).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.token_embedding.row(17)[..32].iter().map(|x| (*x as f64).powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
