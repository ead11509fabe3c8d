use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::probe::ResponseMatrices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Delta,
    Phi,
    Theta,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Delta, Metric::Phi, Metric::Theta];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Delta => "delta",
            Metric::Phi => "phi",
            Metric::Theta => "theta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "delta" => Ok(Metric::Delta),
            "phi" => Ok(Metric::Phi),
            "theta" => Ok(Metric::Theta),
            other => Err(ProbeError::Config(format!("unknown metric `{other}`"))),
        }
    }

    fn matrix(self, layer: &crate::probe::LayerMatrices) -> &Vec<Vec<f64>> {
        match self {
            Metric::Delta => &layer.c_delta,
            Metric::Phi => &layer.c_phi,
            Metric::Theta => &layer.c_theta,
        }
    }
}

/// Diagonal averages of one matrix, indexed by offset `Δj`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalProfile {
    /// `None` where no valid entry lies on the diagonal.
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// `C̄(Δj) = Σ_i C[i][i+Δj] / n(Δj)` for `Δj = 0…T−1`.
///
/// Rows that were not perturbed are skipped. For θ, entries in the undefined
/// mask are skipped too; Δ and φ are well defined (zero) there. Terms are
/// summed in ascending `i` with an `f64` accumulator.
pub fn diagonal_average(m: &ResponseMatrices, metric: Metric, layer_pos: usize) -> Result<DiagonalProfile> {
    let layer = m.layers.get(layer_pos).ok_or_else(|| {
        ProbeError::Analysis(format!(
            "residual position {layer_pos} outside [0, {})",
            m.layers.len()
        ))
    })?;
    let t = m.seq_len;
    let mat = metric.matrix(layer);
    let mut values = Vec::with_capacity(t);
    let mut counts = Vec::with_capacity(t);
    for dj in 0..t {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..t - dj {
            if !m.rows_present[i] || (metric == Metric::Theta && layer.undefined[i][i + dj]) {
                continue;
            }
            sum += mat[i][i + dj];
            n += 1;
        }
        values.push((n > 0).then(|| sum / n as f64));
        counts.push(n);
    }
    Ok(DiagonalProfile { values, counts })
}

/// Response function of one metric at every residual position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFunction {
    pub metric: Metric,
    pub eps: f64,
    /// Indexed `[ℓ][Δj]`.
    pub values: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

impl ResponseFunction {
    pub fn n_positions(&self) -> usize {
        self.values.len()
    }

    pub fn seq_len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn value(&self, layer_pos: usize, dj: usize) -> Option<f64> {
        self.values.get(layer_pos).and_then(|v| v.get(dj)).copied().flatten()
    }
}

pub fn response_function(m: &ResponseMatrices, metric: Metric) -> Result<ResponseFunction> {
    let mut values = Vec::with_capacity(m.layers.len());
    let mut counts = Vec::with_capacity(m.layers.len());
    for l in 0..m.layers.len() {
        let p = diagonal_average(m, metric, l)?;
        values.push(p.values);
        counts.push(p.counts);
    }
    Ok(ResponseFunction {
        metric,
        eps: m.eps,
        values,
        counts,
    })
}
