//! Alignment of the response with the unperturbed state across strengths.

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

use super::{find_eps, Metric, ResponseFunction};

/// `|C̄_θ|` bound for a response counted as nearly orthogonal.
pub const THETA_BOUND: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOrthogonality {
    pub layer_pos: usize,
    /// Largest `|C̄_θ(ε₀, Δj)|` over `Δj ≥ min_dj`.
    pub max_abs_theta: Option<f64>,
    pub argmax_dj: Option<usize>,
    /// Largest change of `C̄_θ` between the two smallest strengths.
    pub stability: Option<f64>,
    pub within_bound: bool,
    /// Mean of `C̄_Δ(ε, Δj)/ε` over `Δj ≥ min_dj`, per strength in grid
    /// order; empty when no Δ functions were supplied.
    pub amplitude_over_eps: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub eps0: f64,
    pub eps: Vec<f64>,
    pub min_dj: usize,
    pub bound: f64,
    pub layers: Vec<LayerOrthogonality>,
    /// Residual positions whose maximum exceeds the bound.
    pub violating: Vec<usize>,
}

/// Summarizes θ response functions measured at several strengths. The
/// perturbed position itself (`Δj = 0`) is antiparallel by construction, so
/// offsets below `min_dj` are left out.
pub fn orthogonality_report(
    theta: &[ResponseFunction],
    delta: Option<&[ResponseFunction]>,
    eps0: f64,
    min_dj: usize,
) -> Result<OrthogonalityReport> {
    if theta.len() < 2 {
        return Err(ProbeError::Analysis("orthogonality report needs at least two strengths".into()));
    }
    if theta.iter().any(|f| f.metric != Metric::Theta) {
        return Err(ProbeError::Analysis("expected theta response functions".into()));
    }
    let grid: Vec<f64> = theta.iter().map(|f| f.eps).collect();
    let ref_idx = find_eps(&grid, eps0)
        .ok_or_else(|| ProbeError::Analysis(format!("reference strength {eps0} not in grid {grid:?}")))?;
    let n_pos = theta[ref_idx].n_positions();
    let t = theta[ref_idx].seq_len();
    if theta.iter().any(|f| f.n_positions() != n_pos || f.seq_len() != t) {
        return Err(ProbeError::Analysis("theta functions differ in shape".into()));
    }
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|a, b| grid[*a].total_cmp(&grid[*b]));
    let (small, next) = (order[0], order[1]);

    let mut layers = Vec::with_capacity(n_pos);
    let mut violating = Vec::new();
    for l in 0..n_pos {
        let mut best: Option<(usize, f64)> = None;
        let mut stability: Option<f64> = None;
        for dj in min_dj..t {
            if let Some(v) = theta[ref_idx].value(l, dj) {
                if best.is_none_or(|(_, b)| v.abs() > b) {
                    best = Some((dj, v.abs()));
                }
            }
            if let (Some(a), Some(b)) = (theta[small].value(l, dj), theta[next].value(l, dj)) {
                let d = (a - b).abs();
                stability = Some(stability.map_or(d, |s: f64| s.max(d)));
            }
        }
        let within_bound = best.is_none_or(|(_, m)| m < THETA_BOUND);
        if !within_bound {
            violating.push(l);
        }
        let amplitude_over_eps = delta
            .map(|funcs| {
                funcs
                    .iter()
                    .map(|f| {
                        let vals: Vec<f64> = (min_dj..t).filter_map(|dj| f.value(l, dj)).collect();
                        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64 / f.eps)
                    })
                    .collect()
            })
            .unwrap_or_default();
        layers.push(LayerOrthogonality {
            layer_pos: l,
            max_abs_theta: best.map(|(_, m)| m),
            argmax_dj: best.map(|(d, _)| d),
            stability,
            within_bound,
            amplitude_over_eps,
        });
    }
    Ok(OrthogonalityReport {
        eps0: grid[ref_idx],
        eps: grid,
        min_dj,
        bound: THETA_BOUND,
        layers,
        violating,
    })
}
