//! Checkpoint loading.

mod archive;
mod gpt2;

pub use archive::{encode_archive, load_archive, write_archive, Dtype, NamedTensorArchive, TensorEntry};
pub use gpt2::{build_gpt2, export_gpt2, infer_gpt2_config, Gpt2Names, GPT2_HEAD_DIM, GPT2_LN_EPS};

use std::path::{Path, PathBuf};

use crate::error::{ProbeError, Result};
use crate::model::Model;
use crate::scalar::Scalar;

/// Environment variable naming a directory of cached checkpoints.
pub const CACHE_ENV: &str = "RESIDUAL_PROBE_CACHE";

/// Resolves a weights path, falling back to the cache directory for paths
/// that do not exist as given.
pub fn resolve_weights_path(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        let candidate = PathBuf::from(dir).join(path);
        if candidate.exists() {
            return Ok(candidate);
        }
        let nested = candidate.join("model.safetensors");
        if nested.exists() {
            return Ok(nested);
        }
    }
    Err(ProbeError::Load(format!(
        "weights file {} not found (also searched ${CACHE_ENV})",
        path.display()
    )))
}

/// Loads a GPT-2 checkpoint and builds a ready model.
pub fn load_gpt2<S: Scalar>(path: impl AsRef<Path>, n_heads: Option<usize>) -> Result<Model<S>> {
    let archive = load_archive(resolve_weights_path(path)?)?;
    let config = infer_gpt2_config(&archive, n_heads)?;
    let weights = build_gpt2(&archive, &config)?;
    Model::new(config, weights)
}
