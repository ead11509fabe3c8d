use crate::error::{ProbeError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, gelu, gelu_tanh, layer_norm_into, matmul_nt, softmax_in_place, Tensor};

use super::{Activation, LayerWeights, Model, NormKind};

/// Residual states `x^(ℓ)` for ℓ = 0…2L, each `T×D`.
///
/// Index 0 is the input state, odd indices follow an attention residual
/// addition and even indices > 0 follow an MLP residual addition.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace<S> {
    pub states: Vec<Tensor<S>>,
}

impl<S: Scalar> ResidualTrace<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.states.first().map_or(0, Tensor::rows)
    }

    /// `states[ℓ] − states[ℓ−1]`, the output of sublayer ℓ.
    pub fn increment(&self, layer_pos: usize) -> Tensor<S> {
        let a = &self.states[layer_pos];
        let b = &self.states[layer_pos - 1];
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
        Tensor::new(a.shape().to_vec(), data).expect("states share a shape")
    }
}

/// Attention probabilities per block and head, each `T×T` (row = query).
pub type AttentionPatterns<S> = Vec<Vec<Tensor<S>>>;

/// A forward pass plus the attention keys and values of every block, so that
/// a later pass differing only from some row onward can reuse the prefix.
#[derive(Debug, Clone)]
pub struct ForwardRun<S> {
    pub trace: ResidualTrace<S>,
    keys: Vec<Tensor<S>>,
    values: Vec<Tensor<S>>,
}

pub(crate) fn apply_norm<S: Scalar>(norm: NormKind, x: &[S], gain: &[S], bias: &[S], out: &mut [S]) {
    match norm {
        NormKind::LayerNorm { eps } => layer_norm_into(x, gain, bias, S::from_f64_lossy(eps), out),
        NormKind::Identity => out.copy_from_slice(x),
    }
}

fn normed<S: Scalar>(norm: NormKind, x: &Tensor<S>, gain: &[S], bias: &[S]) -> Tensor<S> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    let cols = x.cols();
    for r in 0..x.rows() {
        apply_norm(norm, x.row(r), gain, bias, &mut out.data_mut()[r * cols..(r + 1) * cols]);
    }
    out
}

fn check_finite<S: Scalar>(t: &Tensor<S>, layer_pos: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(ProbeError::Numeric { layer_pos })
    }
}

/// Stacks `prefix` rows `[0, start)` of a full `T×D` state on top of `suffix`.
fn splice<S: Scalar>(prefix: Option<&Tensor<S>>, start: usize, suffix: &Tensor<S>) -> Tensor<S> {
    match prefix {
        None => suffix.clone(),
        Some(p) => {
            let cols = suffix.cols();
            let mut data = Vec::with_capacity((start + suffix.rows()) * cols);
            data.extend_from_slice(&p.data()[..start * cols]);
            data.extend_from_slice(suffix.data());
            Tensor::new(vec![start + suffix.rows(), cols], data).expect("consistent widths")
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Runs every block from the input residual state `x0` (`T×D`) and
    /// returns all `2L + 1` residual states.
    pub fn forward_from_state(&self, x0: &Tensor<S>) -> Result<ResidualTrace<S>> {
        Ok(self.run(x0, 0, None, None)?.trace)
    }

    /// Full forward that also keeps per-block keys and values.
    pub fn forward_run(&self, x0: &Tensor<S>) -> Result<ForwardRun<S>> {
        self.run(x0, 0, None, None)
    }

    /// Forward pass for an input that equals `base`'s input on rows
    /// `[0, start)`. Only rows `start..T` are recomputed; causal masking makes
    /// the result bit-identical to [`Model::forward_from_state`].
    pub fn forward_suffix(
        &self,
        base: &ForwardRun<S>,
        x0: &Tensor<S>,
        start: usize,
    ) -> Result<ResidualTrace<S>> {
        if x0.shape() != base.trace.states[0].shape() {
            return Err(ProbeError::Shape(format!(
                "suffix input {:?} does not match base {:?}",
                x0.shape(),
                base.trace.states[0].shape()
            )));
        }
        Ok(self.run(x0, start, Some(base), None)?.trace)
    }

    /// Attention probabilities of every block and head for input `x0`.
    pub fn attention_patterns(&self, x0: &Tensor<S>) -> Result<AttentionPatterns<S>> {
        let mut patterns = Vec::new();
        self.run(x0, 0, None, Some(&mut patterns))?;
        Ok(patterns)
    }

    fn run(
        &self,
        x0: &Tensor<S>,
        start: usize,
        base: Option<&ForwardRun<S>>,
        mut patterns: Option<&mut AttentionPatterns<S>>,
    ) -> Result<ForwardRun<S>> {
        let cfg = &self.config;
        if !x0.is_matrix() || x0.cols() != cfg.d_model {
            return Err(ProbeError::Shape(format!(
                "input state must be T x {}, got {:?}",
                cfg.d_model,
                x0.shape()
            )));
        }
        let t = x0.rows();
        if t > cfg.max_context {
            return Err(ProbeError::Input(format!(
                "sequence length {t} exceeds max_context {}",
                cfg.max_context
            )));
        }
        if start > t || (start > 0 && base.is_none()) {
            return Err(ProbeError::Input(format!("invalid suffix start {start}")));
        }
        check_finite(x0, 0)?;

        let d = cfg.d_model;
        let rows = t - start;
        let mut x = Tensor::new(vec![rows, d], x0.data()[start * d..].to_vec())?;
        let mut states = Vec::with_capacity(cfg.n_positions());
        states.push(x0.clone());
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);

        for (li, layer) in self.weights.layers.iter().enumerate() {
            let attn_pos = 2 * li + 1;
            let h = normed(cfg.norm, &x, &layer.ln1_gain, &layer.ln1_bias);
            let q = matmul_nt(&h, &layer.w_q, Some(&layer.b_q))?;
            let k_new = matmul_nt(&h, &layer.w_k, Some(&layer.b_k))?;
            let v_new = matmul_nt(&h, &layer.w_v, Some(&layer.b_v))?;
            let k = splice(base.map(|b| &b.keys[li]), start, &k_new);
            let v = splice(base.map(|b| &b.values[li]), start, &v_new);
            let mixed = self.attend(&q, &k, &v, start, patterns.as_deref_mut())?;
            let attn_out = matmul_nt(&mixed, &layer.w_o, Some(&layer.b_o))?;
            add_assign(&mut x, &attn_out);
            check_finite(&x, attn_pos)?;
            states.push(splice(base.map(|b| &b.trace.states[attn_pos]), start, &x));
            keys.push(k);
            values.push(v);

            if cfg.has_mlp {
                let mlp_out = self.mlp(layer, &x)?;
                add_assign(&mut x, &mlp_out);
                check_finite(&x, attn_pos + 1)?;
            }
            states.push(splice(base.map(|b| &b.trace.states[attn_pos + 1]), start, &x));
        }

        Ok(ForwardRun {
            trace: ResidualTrace { states },
            keys,
            values,
        })
    }

    /// Causal multi-head attention for query rows `start..T` against all
    /// key/value rows up to and including each query's position.
    fn attend(
        &self,
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
        start: usize,
        patterns: Option<&mut AttentionPatterns<S>>,
    ) -> Result<Tensor<S>> {
        let cfg = &self.config;
        let (nh, dh) = (cfg.n_heads, cfg.d_head);
        let t = k.rows();
        let scale = S::one() / S::from_usize(dh).unwrap_or_else(S::one).sqrt();
        let mut out = Tensor::zeros(vec![q.rows(), nh * dh]);
        let mut layer_patterns: Vec<Tensor<S>> = if patterns.is_some() {
            (0..nh).map(|_| Tensor::zeros(vec![t, t])).collect()
        } else {
            Vec::new()
        };
        let mut scores = Vec::with_capacity(t);
        for r in 0..q.rows() {
            let p = start + r;
            let qrow = q.row(r);
            for head in 0..nh {
                let hs = head * dh..(head + 1) * dh;
                let qh = &qrow[hs.clone()];
                scores.clear();
                scores.extend((0..=p).map(|j| dot(qh, &k.row(j)[hs.clone()])));
                softmax_in_place(&mut scores, scale);
                let orow = &mut out.row_mut(r)[hs.clone()];
                for (j, a) in scores.iter().enumerate() {
                    let vh = &v.row(j)[hs.clone()];
                    for (o, vv) in orow.iter_mut().zip(vh) {
                        *o += *a * *vv;
                    }
                }
                if let Some(pat) = layer_patterns.get_mut(head) {
                    pat.row_mut(p)[..=p].copy_from_slice(&scores);
                }
            }
        }
        if let Some(all) = patterns {
            all.push(layer_patterns);
        }
        Ok(out)
    }

    fn mlp(&self, layer: &LayerWeights<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let cfg = &self.config;
        let h = normed(cfg.norm, x, &layer.ln2_gain, &layer.ln2_bias);
        let mut up = matmul_nt(&h, &layer.w_in, Some(&layer.b_in))?;
        let act = match cfg.activation {
            Activation::GeluErf => gelu::<S>,
            Activation::GeluTanh => gelu_tanh::<S>,
        };
        up.data_mut().iter_mut().for_each(|e| *e = act(*e));
        matmul_nt(&up, &layer.w_out, Some(&layer.b_out))
    }
}

fn add_assign<S: Scalar>(x: &mut Tensor<S>, y: &Tensor<S>) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += *b;
    }
}
