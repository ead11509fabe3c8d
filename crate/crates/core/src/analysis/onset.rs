//! Where along the residual stream the response maximum moves from the
//! same-token offset `T₀` to the induction offset `T₀ − 1`.

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

use super::ResponseFunction;

/// Default window `T₀ − 5 … T₀ + 5`.
pub fn default_window(t0: usize) -> (usize, usize) {
    (t0.saturating_sub(5), t0 + 5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetReport {
    pub t0: usize,
    /// Inclusive `Δj` window after clipping to `[0, T − 1]`.
    pub window: (usize, usize),
    pub clipped: bool,
    /// Offset of the per-ℓ maximum; `None` for rows that are zero or undefined.
    pub argmax: Vec<Option<usize>>,
    /// `[ℓ][Δj − window.0]`, each row divided by its maximum.
    pub normalized: Vec<Vec<Option<f64>>>,
    /// First ℓ after the last maximum at `T₀` that precedes `crossover_hi`;
    /// `None` when no maximum at `T₀` is observed before it.
    pub crossover_lo: Option<usize>,
    /// First ℓ from which the maximum stays at `T₀ − 1` through ℓ = 2L.
    pub crossover_hi: Option<usize>,
    /// First ℓ where `C̄_θ(ℓ, T₀ − 1)` changes sign relative to the
    /// previous defined value.
    pub theta_sign_change: Option<usize>,
}

pub fn onset_report(
    func: &ResponseFunction,
    t0: usize,
    window: Option<(usize, usize)>,
    theta: Option<&ResponseFunction>,
) -> Result<OnsetReport> {
    let t = func.seq_len();
    if t == 0 || t0 == 0 || t0 >= t {
        return Err(ProbeError::Analysis(format!("t0 = {t0} incompatible with length {t}")));
    }
    let (lo, hi) = window.unwrap_or_else(|| default_window(t0));
    if lo > hi {
        return Err(ProbeError::Analysis(format!("empty window [{lo}, {hi}]")));
    }
    let clipped_hi = hi.min(t - 1);
    let clipped = clipped_hi != hi;
    if clipped {
        log::warn!("onset window [{lo}, {hi}] clipped to [{lo}, {clipped_hi}]");
    }
    let hi = clipped_hi;
    if !(lo < t0 && t0 <= hi) {
        return Err(ProbeError::Analysis(format!(
            "window [{lo}, {hi}] must contain offsets {} and {t0}",
            t0 - 1
        )));
    }

    let mut argmax = Vec::with_capacity(func.n_positions());
    let mut normalized = Vec::with_capacity(func.n_positions());
    for l in 0..func.n_positions() {
        let mut best: Option<(usize, f64)> = None;
        for dj in lo..=hi {
            if let Some(v) = func.value(l, dj) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((dj, v));
                }
            }
        }
        match best {
            Some((dj, max)) if max > 0.0 => {
                argmax.push(Some(dj));
                normalized.push((lo..=hi).map(|d| func.value(l, d).map(|v| v / max)).collect());
            }
            _ => {
                argmax.push(None);
                normalized.push(vec![None; hi - lo + 1]);
            }
        }
    }

    let induction = Some(t0 - 1);
    let crossover_hi = if argmax.last().copied().flatten() == induction {
        let mut l = argmax.len() - 1;
        while l > 0 && argmax[l - 1] == induction {
            l -= 1;
        }
        Some(l)
    } else {
        None
    };
    let crossover_lo = crossover_hi.and_then(|h| {
        argmax[..h]
            .iter()
            .rposition(|a| *a == Some(t0))
            .map(|last_same| last_same + 1)
    });

    let theta_sign_change = theta.and_then(|th| {
        let mut prev: Option<f64> = None;
        for l in 0..th.n_positions() {
            match th.value(l, t0 - 1) {
                Some(v) if v != 0.0 => {
                    if prev.is_some_and(|p| p.signum() != v.signum()) {
                        return Some(l);
                    }
                    prev = Some(v);
                }
                _ => {}
            }
        }
        None
    });

    Ok(OnsetReport {
        t0,
        window: (lo, hi),
        clipped,
        argmax,
        normalized,
        crossover_lo,
        crossover_hi,
        theta_sign_change,
    })
}
