//! Decoder-only pre-norm transformer (GPT-2 family layout).

mod forward;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use forward::{AttentionPatterns, ForwardRun, ResidualTrace};

/// How the two per-block norms and the final norm behave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm { eps: f64 },
    /// Pass-through; gains and biases are ignored.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluErf,
    GeluTanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub has_mlp: bool,
    pub final_norm: bool,
    pub norm: NormKind,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(ProbeError::Config(format!(
                "n_heads ({}) * d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.d_model == 0 || self.vocab_size == 0 || self.max_context == 0 {
            return Err(ProbeError::Config(
                "d_model, vocab_size and max_context must be positive".into(),
            ));
        }
        if self.has_mlp && self.d_mlp == 0 {
            return Err(ProbeError::Config("has_mlp requires d_mlp > 0".into()));
        }
        Ok(())
    }

    /// Number of residual positions in a trace, `2L + 1`.
    pub fn n_positions(&self) -> usize {
        2 * self.n_layers + 1
    }
}

/// What wrote the residual state at position ℓ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum SublayerKind {
    Input,
    /// Attention sublayer of the 0-based block index.
    Attention(usize),
    /// MLP sublayer of the 0-based block index.
    Mlp(usize),
}

impl SublayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            SublayerKind::Input => "input",
            SublayerKind::Attention(_) => "mha",
            SublayerKind::Mlp(_) => "mlp",
        }
    }
}

/// Maps a residual position ℓ ∈ [0, 2L] to its sublayer: odd ℓ is the
/// attention of block (ℓ−1)/2, even ℓ > 0 the MLP of block ℓ/2 − 1.
pub fn sublayer_kind(layer_pos: usize, n_layers: usize) -> Result<SublayerKind> {
    if layer_pos > 2 * n_layers {
        return Err(ProbeError::Input(format!(
            "residual position {layer_pos} outside [0, {}]",
            2 * n_layers
        )));
    }
    Ok(match layer_pos {
        0 => SublayerKind::Input,
        l if l % 2 == 1 => SublayerKind::Attention((l - 1) / 2),
        l => SublayerKind::Mlp(l / 2 - 1),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub ln1_gain: Vec<S>,
    pub ln1_bias: Vec<S>,
    /// Projections are stored `[out, in]`.
    pub w_q: Tensor<S>,
    pub b_q: Vec<S>,
    pub w_k: Tensor<S>,
    pub b_k: Vec<S>,
    pub w_v: Tensor<S>,
    pub b_v: Vec<S>,
    pub w_o: Tensor<S>,
    pub b_o: Vec<S>,
    pub ln2_gain: Vec<S>,
    pub ln2_bias: Vec<S>,
    pub w_in: Tensor<S>,
    pub b_in: Vec<S>,
    pub w_out: Tensor<S>,
    pub b_out: Vec<S>,
}

impl<S: Scalar> LayerWeights<S> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let m = if config.has_mlp { config.d_mlp } else { 0 };
        Self {
            ln1_gain: vec![S::one(); d],
            ln1_bias: vec![S::zero(); d],
            w_q: Tensor::zeros(vec![d, d]),
            b_q: vec![S::zero(); d],
            w_k: Tensor::zeros(vec![d, d]),
            b_k: vec![S::zero(); d],
            w_v: Tensor::zeros(vec![d, d]),
            b_v: vec![S::zero(); d],
            w_o: Tensor::zeros(vec![d, d]),
            b_o: vec![S::zero(); d],
            ln2_gain: vec![S::one(); d],
            ln2_bias: vec![S::zero(); d],
            w_in: Tensor::zeros(vec![m, d]),
            b_in: vec![S::zero(); m],
            w_out: Tensor::zeros(vec![d, m]),
            b_out: vec![S::zero(); d],
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<S>); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_in", &self.w_in),
            ("w_out", &self.w_out),
        ]
    }

    fn vectors(&self) -> [(&'static str, &Vec<S>); 10] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("b_v", &self.b_v),
            ("b_o", &self.b_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("b_in", &self.b_in),
            ("b_out", &self.b_out),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<S> {
    pub token_embedding: Tensor<S>,
    pub positional_embedding: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_gain: Vec<S>,
    pub final_bias: Vec<S>,
}

impl<S: Scalar> ModelWeights<S> {
    /// All-zero projections and embeddings with unit norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            token_embedding: Tensor::zeros(vec![config.vocab_size, d]),
            positional_embedding: Tensor::zeros(vec![config.max_context, d]),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(config)).collect(),
            final_gain: vec![S::one(); d],
            final_bias: vec![S::zero(); d],
        }
    }

    /// GPT-2 style initialization: projections and embeddings drawn from
    /// `N(0, std²)`, small random biases, norm gains near one.
    pub fn random<R: Rng>(config: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut fill = |shape: Vec<usize>, offset: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| S::from_f64_lossy(offset + normal.sample(rng)))
                .collect();
            Tensor::new(shape, data).expect("sized")
        };
        let d = config.d_model;
        let hd = config.n_heads * config.d_head;
        let m = if config.has_mlp { config.d_mlp } else { 0 };
        let token_embedding = fill(vec![config.vocab_size, d], 0.0);
        let positional_embedding = fill(vec![config.max_context, d], 0.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: fill(vec![d], 1.0).into_data(),
                ln1_bias: fill(vec![d], 0.0).into_data(),
                w_q: fill(vec![hd, d], 0.0),
                b_q: fill(vec![hd], 0.0).into_data(),
                w_k: fill(vec![hd, d], 0.0),
                b_k: fill(vec![hd], 0.0).into_data(),
                w_v: fill(vec![hd, d], 0.0),
                b_v: fill(vec![hd], 0.0).into_data(),
                w_o: fill(vec![d, hd], 0.0),
                b_o: fill(vec![d], 0.0).into_data(),
                ln2_gain: fill(vec![d], 1.0).into_data(),
                ln2_bias: fill(vec![d], 0.0).into_data(),
                w_in: fill(vec![m, d], 0.0),
                b_in: fill(vec![m], 0.0).into_data(),
                w_out: fill(vec![d, m], 0.0),
                b_out: fill(vec![d], 0.0).into_data(),
            });
        }
        Self {
            token_embedding,
            positional_embedding,
            layers,
            final_gain: fill(vec![d], 1.0).into_data(),
            final_bias: fill(vec![d], 0.0).into_data(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModelWeights<T> {
        let v = |x: &Vec<S>| x.iter().map(|e| T::from_f64_lossy(e.as_f64())).collect::<Vec<T>>();
        ModelWeights {
            token_embedding: self.token_embedding.cast(),
            positional_embedding: self.positional_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: v(&l.ln1_gain),
                    ln1_bias: v(&l.ln1_bias),
                    w_q: l.w_q.cast(),
                    b_q: v(&l.b_q),
                    w_k: l.w_k.cast(),
                    b_k: v(&l.b_k),
                    w_v: l.w_v.cast(),
                    b_v: v(&l.b_v),
                    w_o: l.w_o.cast(),
                    b_o: v(&l.b_o),
                    ln2_gain: v(&l.ln2_gain),
                    ln2_bias: v(&l.ln2_bias),
                    w_in: l.w_in.cast(),
                    b_in: v(&l.b_in),
                    w_out: l.w_out.cast(),
                    b_out: v(&l.b_out),
                })
                .collect(),
            final_gain: v(&self.final_gain),
            final_bias: v(&self.final_bias),
        }
    }

    /// Checks every shape against `config` and that all entries are finite.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let hd = config.n_heads * config.d_head;
        let check = |name: String, t: &Tensor<S>, shape: [usize; 2]| -> Result<()> {
            if t.shape() != shape {
                return Err(ProbeError::Shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(ProbeError::Load(format!("{name}: non-finite entries")));
            }
            Ok(())
        };
        let check_vec = |name: String, v: &[S], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(ProbeError::Shape(format!(
                    "{name}: expected length {len}, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ProbeError::Load(format!("{name}: non-finite entries")));
            }
            Ok(())
        };
        check("token_embedding".into(), &self.token_embedding, [config.vocab_size, d])?;
        check(
            "positional_embedding".into(),
            &self.positional_embedding,
            [config.max_context, d],
        )?;
        if self.layers.len() != config.n_layers {
            return Err(ProbeError::Shape(format!(
                "expected {} layers, got {}",
                config.n_layers,
                self.layers.len()
            )));
        }
        let m = if config.has_mlp { config.d_mlp } else { 0 };
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                let shape = match name {
                    "w_q" | "w_k" | "w_v" => [hd, d],
                    "w_o" => [d, hd],
                    "w_in" if config.has_mlp => [m, d],
                    "w_out" if config.has_mlp => [d, m],
                    _ => continue,
                };
                check(format!("layers.{li}.{name}"), t, shape)?;
            }
            for (name, v) in layer.vectors() {
                let len = match name {
                    "b_q" | "b_k" | "b_v" => hd,
                    "b_in" if config.has_mlp => m,
                    "b_in" => continue,
                    _ => d,
                };
                check_vec(format!("layers.{li}.{name}"), v, len)?;
            }
        }
        check_vec("final_gain".into(), &self.final_gain, d)?;
        check_vec("final_bias".into(), &self.final_bias, d)?;
        Ok(())
    }
}

/// Validated configuration plus weights.
#[derive(Debug, Clone)]
pub struct Model<S> {
    config: ModelConfig,
    weights: ModelWeights<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, weights: ModelWeights<S>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<S> {
        &self.weights
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    /// `x⁰` = token embedding + positional embedding, row by row.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        let d = self.config.d_model;
        if tokens.len() > self.config.max_context {
            return Err(ProbeError::Input(format!(
                "sequence length {} exceeds max_context {}",
                tokens.len(),
                self.config.max_context
            )));
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (p, &tok) in tokens.iter().enumerate() {
            let t = tok as usize;
            if t >= self.config.vocab_size {
                return Err(ProbeError::Input(format!(
                    "token id {tok} at position {p} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let e = self.weights.token_embedding.row(t);
            let pe = self.weights.positional_embedding.row(p);
            data.extend(e.iter().zip(pe).map(|(a, b)| *a + *b));
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    pub fn forward_with_trace(&self, tokens: &[u32]) -> Result<ResidualTrace<S>> {
        let x0 = self.embed(tokens)?;
        self.forward_from_state(&x0)
    }

    /// Final norm applied to a residual state; used only at readout.
    pub fn final_readout(&self, state: &Tensor<S>) -> Tensor<S> {
        if !self.config.final_norm {
            return state.clone();
        }
        let mut out = state.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = state.row(r);
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            forward::apply_norm(self.config.norm, row, &self.weights.final_gain, &self.weights.final_bias, dst);
        }
        out
    }
}
