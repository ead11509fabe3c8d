//! Per-sublayer increments of a response function at a fixed offset.

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::model::{sublayer_kind, SublayerKind};

use super::{Metric, ResponseFunction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementReport {
    pub metric: Metric,
    pub dj: usize,
    /// `C̄^(ℓ)` for ℓ = 0…2L.
    pub values: Vec<f64>,
    /// `ΔC^(ℓ) = C̄^(ℓ) − C̄^(ℓ−1)`; entry `k` belongs to ℓ = k + 1.
    pub increments: Vec<f64>,
    pub kinds: Vec<SublayerKind>,
    /// Increments divided by their signed sum (Δ and φ only). `None` when
    /// the metric is θ or the sum vanishes.
    pub normalized: Option<Vec<f64>>,
    pub sum_mha: f64,
    pub sum_mlp: f64,
}

impl IncrementReport {
    pub fn total(&self) -> f64 {
        self.increments.iter().sum()
    }
}

pub fn layer_increments(func: &ResponseFunction, dj: usize, n_layers: usize) -> Result<IncrementReport> {
    if func.n_positions() != 2 * n_layers + 1 {
        return Err(ProbeError::Analysis(format!(
            "response function has {} residual positions, expected {}",
            func.n_positions(),
            2 * n_layers + 1
        )));
    }
    let values = (0..func.n_positions())
        .map(|l| {
            func.value(l, dj).ok_or_else(|| {
                ProbeError::Analysis(format!(
                    "{} response undefined at residual position {l}, offset {dj}",
                    func.metric.name()
                ))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let increments: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let kinds = (1..values.len())
        .map(|l| sublayer_kind(l, n_layers))
        .collect::<Result<Vec<_>>>()?;
    let (mut sum_mha, mut sum_mlp) = (0.0, 0.0);
    for (inc, kind) in increments.iter().zip(&kinds) {
        match kind {
            SublayerKind::Attention(_) => sum_mha += inc,
            SublayerKind::Mlp(_) => sum_mlp += inc,
            SublayerKind::Input => {}
        }
    }
    let total: f64 = increments.iter().sum();
    let normalized = (func.metric != Metric::Theta && total != 0.0)
        .then(|| increments.iter().map(|i| i / total).collect());
    Ok(IncrementReport {
        metric: func.metric,
        dj,
        values,
        increments,
        kinds,
        normalized,
        sum_mha,
        sum_mlp,
    })
}
