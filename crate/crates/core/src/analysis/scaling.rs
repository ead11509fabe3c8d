//! Collapse of response functions under `ε → λε`.

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

use super::{find_eps, ResponseFunction};

/// Reference values below this are excluded from ratio averages.
pub const REFERENCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingLaw {
    Linear,
    Quadratic,
}

impl ScalingLaw {
    /// Expected ratio `C̄(ε)/C̄(ε₀)` for `λ = ε/ε₀`.
    pub fn chi(self, lambda: f64) -> f64 {
        match self {
            ScalingLaw::Linear => lambda,
            ScalingLaw::Quadratic => lambda * lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub eps: f64,
    /// `(Δj, C̄(ε, Δj) / C̄(ε₀, Δj))` over the retained offsets.
    pub ratios: Vec<(usize, f64)>,
    /// Mean ratio; `None` when no offset was retained.
    pub chi: Option<f64>,
    pub chi_law: f64,
    /// `(χ − χ_law) / χ_law`.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub metric: super::Metric,
    pub layer_pos: usize,
    pub law: ScalingLaw,
    pub eps0: f64,
    pub points: Vec<ScalingPoint>,
    pub retained_dj: Vec<usize>,
    /// Offsets dropped because the reference value was below [`REFERENCE_FLOOR`].
    pub excluded_dj: Vec<usize>,
}

impl ScalingReport {
    pub fn point(&self, eps: f64) -> Option<&ScalingPoint> {
        let grid: Vec<f64> = self.points.iter().map(|p| p.eps).collect();
        find_eps(&grid, eps).map(|i| &self.points[i])
    }
}

/// Ratios of each response function to the one at `eps0`, at residual
/// position `layer_pos`, compared with `law`.
pub fn scaling_report(
    funcs: &[ResponseFunction],
    layer_pos: usize,
    eps0: f64,
    law: ScalingLaw,
) -> Result<ScalingReport> {
    let grid: Vec<f64> = funcs.iter().map(|f| f.eps).collect();
    let ref_idx = find_eps(&grid, eps0)
        .ok_or_else(|| ProbeError::Analysis(format!("reference strength {eps0} not in grid {grid:?}")))?;
    let reference = &funcs[ref_idx];
    if funcs.iter().any(|f| f.metric != reference.metric || f.seq_len() != reference.seq_len()) {
        return Err(ProbeError::Analysis("response functions differ in metric or length".into()));
    }
    if layer_pos >= reference.n_positions() || funcs.iter().any(|f| f.n_positions() != reference.n_positions()) {
        return Err(ProbeError::Analysis(format!(
            "residual position {layer_pos} unavailable in every response function"
        )));
    }

    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    for dj in 0..reference.seq_len() {
        match reference.value(layer_pos, dj) {
            Some(v) if v.abs() >= REFERENCE_FLOOR => retained.push(dj),
            _ => excluded.push(dj),
        }
    }

    let ref_eps = reference.eps;
    let points = funcs
        .iter()
        .map(|f| {
            let ratios: Vec<(usize, f64)> = retained
                .iter()
                .filter_map(|&dj| {
                    let r = reference.value(layer_pos, dj)?;
                    f.value(layer_pos, dj).map(|v| (dj, v / r))
                })
                .collect();
            let chi = (!ratios.is_empty())
                .then(|| ratios.iter().map(|(_, r)| r).sum::<f64>() / ratios.len() as f64);
            let chi_law = law.chi(f.eps / ref_eps);
            ScalingPoint {
                eps: f.eps,
                delta: chi.map(|c| (c - chi_law) / chi_law),
                chi,
                chi_law,
                ratios,
            }
        })
        .collect();
    Ok(ScalingReport {
        metric: reference.metric,
        layer_pos,
        law,
        eps0: ref_eps,
        points,
        retained_dj: retained,
        excluded_dj: excluded,
    })
}
