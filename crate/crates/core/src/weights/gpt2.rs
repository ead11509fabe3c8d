//! GPT-2 checkpoint mapping.
//!
//! Checkpoints store projections as `[in, out]` (the original Conv1D layout);
//! the engine wants `[out, in]`, so every projection is transposed on load and
//! again on export. The fused `c_attn` projection is split into Q, K and V.

use crate::error::{ProbeError, Result};
use crate::model::{Activation, LayerWeights, ModelConfig, ModelWeights, NormKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::archive::NamedTensorArchive;

/// Head width shared by every GPT-2 size.
pub const GPT2_HEAD_DIM: usize = 64;
pub const GPT2_LN_EPS: f64 = 1e-5;

/// Checkpoint tensor names, relative to an optional `transformer.` prefix.
pub struct Gpt2Names;

impl Gpt2Names {
    pub const TOKEN_EMBEDDING: &'static str = "wte.weight";
    pub const POSITION_EMBEDDING: &'static str = "wpe.weight";
    pub const FINAL_GAIN: &'static str = "ln_f.weight";
    pub const FINAL_BIAS: &'static str = "ln_f.bias";

    /// Per-block suffixes, in the order they are read.
    pub const BLOCK: [&'static str; 12] = [
        "ln_1.weight",
        "ln_1.bias",
        "attn.c_attn.weight",
        "attn.c_attn.bias",
        "attn.c_proj.weight",
        "attn.c_proj.bias",
        "ln_2.weight",
        "ln_2.bias",
        "mlp.c_fc.weight",
        "mlp.c_fc.bias",
        "mlp.c_proj.weight",
        "mlp.c_proj.bias",
    ];

    pub fn block(layer: usize, suffix: &str) -> String {
        format!("h.{layer}.{suffix}")
    }

    /// Every name a checkpoint with `n_layers` blocks must provide.
    pub fn all(n_layers: usize) -> Vec<String> {
        let mut names = vec![
            Self::TOKEN_EMBEDDING.to_string(),
            Self::POSITION_EMBEDDING.to_string(),
        ];
        for l in 0..n_layers {
            names.extend(Self::BLOCK.iter().map(|s| Self::block(l, s)));
        }
        names.push(Self::FINAL_GAIN.to_string());
        names.push(Self::FINAL_BIAS.to_string());
        names
    }
}

fn prefix(archive: &NamedTensorArchive) -> Result<&'static str> {
    for p in ["", "transformer."] {
        if archive.contains(&format!("{p}{}", Gpt2Names::TOKEN_EMBEDDING)) {
            return Ok(p);
        }
    }
    Err(ProbeError::Load(format!(
        "missing tensor `{}`: not a GPT-2 checkpoint",
        Gpt2Names::TOKEN_EMBEDDING
    )))
}

fn shape2(archive: &NamedTensorArchive, name: &str) -> Result<[usize; 2]> {
    match archive.shape(name) {
        Some([a, b]) => Ok([*a, *b]),
        Some(s) => Err(ProbeError::Load(format!("`{name}` has shape {s:?}, expected a matrix"))),
        None => Err(ProbeError::Load(format!("missing tensor `{name}`"))),
    }
}

/// Reads the configuration off the checkpoint's tensor shapes. The head
/// count is not recorded in the tensors; it defaults to `d_model / 64`.
pub fn infer_gpt2_config(archive: &NamedTensorArchive, n_heads: Option<usize>) -> Result<ModelConfig> {
    let p = prefix(archive)?;
    let [vocab_size, d_model] = shape2(archive, &format!("{p}{}", Gpt2Names::TOKEN_EMBEDDING))?;
    let [max_context, _] = shape2(archive, &format!("{p}{}", Gpt2Names::POSITION_EMBEDDING))?;
    let mut n_layers = 0;
    while archive.contains(&format!("{p}{}", Gpt2Names::block(n_layers, "ln_1.weight"))) {
        n_layers += 1;
    }
    let d_mlp = if n_layers > 0 {
        shape2(archive, &format!("{p}{}", Gpt2Names::block(0, "mlp.c_fc.weight")))?[1]
    } else {
        4 * d_model
    };
    let n_heads = n_heads.unwrap_or(d_model / GPT2_HEAD_DIM).max(1);
    let config = ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_head: d_model / n_heads,
        d_mlp,
        vocab_size,
        max_context,
        has_mlp: true,
        final_norm: true,
        norm: NormKind::LayerNorm { eps: GPT2_LN_EPS },
        activation: Activation::GeluTanh,
    };
    config.validate()?;
    Ok(config)
}

/// Maps every canonical GPT-2 tensor into [`ModelWeights`], shape-checked
/// against `config`.
pub fn build_gpt2<S: Scalar>(archive: &NamedTensorArchive, config: &ModelConfig) -> Result<ModelWeights<S>> {
    config.validate()?;
    if !config.has_mlp {
        return Err(ProbeError::Config("GPT-2 checkpoints always carry MLP blocks".into()));
    }
    let p = prefix(archive)?;
    let d = config.d_model;
    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<S>> {
        let full = format!("{p}{name}");
        let t = archive
            .tensor::<S>(&full)
            .map_err(|_| ProbeError::Load(format!("missing tensor `{full}`")))?;
        if t.shape() != shape {
            return Err(ProbeError::Load(format!(
                "`{full}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let vector = |name: &str, len: usize| fetch(name, &[len]).map(Tensor::into_data);

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let n = |s: &str| Gpt2Names::block(l, s);
        let qkv = fetch(&n("attn.c_attn.weight"), &[d, 3 * d])?.transpose()?;
        let qkv_bias = vector(&n("attn.c_attn.bias"), 3 * d)?;
        let slice = |k: usize| {
            Tensor::new(vec![d, d], qkv.data()[k * d * d..(k + 1) * d * d].to_vec())
                .expect("split of a 3d x d matrix")
        };
        layers.push(LayerWeights {
            ln1_gain: vector(&n("ln_1.weight"), d)?,
            ln1_bias: vector(&n("ln_1.bias"), d)?,
            w_q: slice(0),
            b_q: qkv_bias[..d].to_vec(),
            w_k: slice(1),
            b_k: qkv_bias[d..2 * d].to_vec(),
            w_v: slice(2),
            b_v: qkv_bias[2 * d..].to_vec(),
            w_o: fetch(&n("attn.c_proj.weight"), &[d, d])?.transpose()?,
            b_o: vector(&n("attn.c_proj.bias"), d)?,
            ln2_gain: vector(&n("ln_2.weight"), d)?,
            ln2_bias: vector(&n("ln_2.bias"), d)?,
            w_in: fetch(&n("mlp.c_fc.weight"), &[d, config.d_mlp])?.transpose()?,
            b_in: vector(&n("mlp.c_fc.bias"), config.d_mlp)?,
            w_out: fetch(&n("mlp.c_proj.weight"), &[config.d_mlp, d])?.transpose()?,
            b_out: vector(&n("mlp.c_proj.bias"), d)?,
        });
    }
    let weights = ModelWeights {
        token_embedding: fetch(Gpt2Names::TOKEN_EMBEDDING, &[config.vocab_size, d])?,
        positional_embedding: fetch(Gpt2Names::POSITION_EMBEDDING, &[config.max_context, d])?,
        layers,
        final_gain: vector(Gpt2Names::FINAL_GAIN, d)?,
        final_bias: vector(Gpt2Names::FINAL_BIAS, d)?,
    };
    weights.validate(config)?;
    Ok(weights)
}

/// Inverse of [`build_gpt2`]: the named tensors of a checkpoint in the
/// serialized `[in, out]` convention.
pub fn export_gpt2<S: Scalar>(weights: &ModelWeights<S>) -> Result<Vec<(String, Tensor<S>)>> {
    let mut out = vec![
        (Gpt2Names::TOKEN_EMBEDDING.to_string(), weights.token_embedding.clone()),
        (Gpt2Names::POSITION_EMBEDDING.to_string(), weights.positional_embedding.clone()),
    ];
    let vec1 = |v: &[S]| Tensor::new(vec![v.len()], v.to_vec()).expect("1-d");
    for (l, lw) in weights.layers.iter().enumerate() {
        let n = |s: &str| Gpt2Names::block(l, s);
        let mut qkv = lw.w_q.data().to_vec();
        qkv.extend_from_slice(lw.w_k.data());
        qkv.extend_from_slice(lw.w_v.data());
        let d = lw.w_q.cols();
        let qkv = Tensor::new(vec![3 * lw.w_q.rows(), d], qkv)?.transpose()?;
        let mut qkv_bias = lw.b_q.clone();
        qkv_bias.extend_from_slice(&lw.b_k);
        qkv_bias.extend_from_slice(&lw.b_v);
        out.extend([
            (n("ln_1.weight"), vec1(&lw.ln1_gain)),
            (n("ln_1.bias"), vec1(&lw.ln1_bias)),
            (n("attn.c_attn.weight"), qkv),
            (n("attn.c_attn.bias"), vec1(&qkv_bias)),
            (n("attn.c_proj.weight"), lw.w_o.transpose()?),
            (n("attn.c_proj.bias"), vec1(&lw.b_o)),
            (n("ln_2.weight"), vec1(&lw.ln2_gain)),
            (n("ln_2.bias"), vec1(&lw.ln2_bias)),
            (n("mlp.c_fc.weight"), lw.w_in.transpose()?),
            (n("mlp.c_fc.bias"), vec1(&lw.b_in)),
            (n("mlp.c_proj.weight"), lw.w_out.transpose()?),
            (n("mlp.c_proj.bias"), vec1(&lw.b_out)),
        ]);
    }
    out.push((Gpt2Names::FINAL_GAIN.to_string(), vec1(&weights.final_gain)));
    out.push((Gpt2Names::FINAL_BIAS.to_string(), vec1(&weights.final_bias)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::weights::{encode_archive, Dtype};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelConfig, ModelWeights<f32>) {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 128,
            n_heads: 2,
            d_head: 64,
            d_mlp: 32,
            vocab_size: 10,
            max_context: 8,
            has_mlp: true,
            final_norm: true,
            norm: NormKind::LayerNorm { eps: GPT2_LN_EPS },
            activation: Activation::GeluTanh,
        };
        let w = ModelWeights::random(&config, 0.02, &mut ChaCha8Rng::seed_from_u64(8));
        (config, w)
    }

    fn archive_of(tensors: &[(String, Tensor<f32>)]) -> NamedTensorArchive {
        NamedTensorArchive::from_bytes(encode_archive(tensors, Dtype::F32).unwrap()).unwrap()
    }

    #[test]
    fn export_then_build_round_trips() {
        let (config, w) = small();
        let archive = archive_of(&export_gpt2(&w).unwrap());
        assert_eq!(infer_gpt2_config(&archive, None).unwrap(), config);
        let back: ModelWeights<f32> = build_gpt2(&archive, &config).unwrap();
        assert_eq!(back, w);
        let names: Vec<_> = archive.entries().keys().cloned().collect();
        let mut expected = Gpt2Names::all(2);
        expected.sort();
        assert_eq!(names, expected);
    }

    #[test]
    fn transposed_layout_drives_the_same_forward() {
        let (config, w) = small();
        let archive = archive_of(&export_gpt2(&w).unwrap());
        let a = Model::new(config.clone(), w).unwrap();
        let b = Model::<f32>::new(config.clone(), build_gpt2(&archive, &config).unwrap()).unwrap();
        assert_eq!(a.forward_with_trace(&[1, 2, 3]).unwrap(), b.forward_with_trace(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn prefixed_names_are_accepted() {
        let (config, w) = small();
        let tensors: Vec<_> = export_gpt2(&w)
            .unwrap()
            .into_iter()
            .map(|(n, t)| (format!("transformer.{n}"), t))
            .collect();
        let archive = archive_of(&tensors);
        assert_eq!(build_gpt2::<f32>(&archive, &config).unwrap(), w);
    }

    #[test]
    fn missing_tensor_is_named() {
        let (config, w) = small();
        let tensors: Vec<_> = export_gpt2(&w)
            .unwrap()
            .into_iter()
            .filter(|(n, _)| n != "h.1.mlp.c_fc.bias")
            .collect();
        match build_gpt2::<f32>(&archive_of(&tensors), &config) {
            Err(ProbeError::Load(msg)) => assert!(msg.contains("h.1.mlp.c_fc.bias"), "{msg}"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let (config, w) = small();
        let mut tensors = export_gpt2(&w).unwrap();
        let idx = tensors.iter().position(|(n, _)| n == "h.0.attn.c_proj.weight").unwrap();
        tensors[idx].1 = Tensor::zeros(vec![128, 64]);
        assert!(matches!(build_gpt2::<f32>(&archive_of(&tensors), &config), Err(ProbeError::Load(_))));
    }

    #[test]
    fn non_gpt2_archive_is_rejected() {
        let archive = archive_of(&[("x".to_string(), Tensor::zeros(vec![2, 2]))]);
        assert!(matches!(infer_gpt2_config(&archive, None), Err(ProbeError::Load(_))));
    }
}
