//! Derived quantities computed from stored response matrices.

mod increments;
mod onset;
mod orthogonality;
mod response;
mod scaling;

pub use increments::{layer_increments, IncrementReport};
pub use onset::{default_window, onset_report, OnsetReport};
pub use orthogonality::{orthogonality_report, LayerOrthogonality, OrthogonalityReport, THETA_BOUND};
pub use response::{diagonal_average, response_function, DiagonalProfile, Metric, ResponseFunction};
pub use scaling::{scaling_report, ScalingLaw, ScalingPoint, ScalingReport, REFERENCE_FLOOR};

/// Finds `eps` in a grid up to a relative tolerance.
pub(crate) fn find_eps(grid: &[f64], eps: f64) -> Option<usize> {
    grid.iter()
        .position(|&e| (e - eps).abs() <= 1e-12 * e.abs().max(eps.abs()))
}
