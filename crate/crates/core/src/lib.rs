//! Perturbation-response probing of decoder-only transformers.
//!
//! A single input position of the residual stream is scaled by `1 − ε`, the
//! perturbed and unperturbed forwards are compared at every residual
//! position, and the resulting `T×T` response matrices are reduced to
//! diagonal response functions, scaling collapses, per-sublayer increments
//! and induction-onset maps.
//!
//! Model math is generic over [`Scalar`] (`f32` or `f64`); every metric and
//! analysis quantity is `f64`.

pub mod analysis;
pub mod error;
pub mod model;
pub mod probe;
pub mod scalar;
pub mod sequence;
pub mod tensor;
pub mod toy;
pub mod weights;

pub use error::{ProbeError, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Weights32 = model::ModelWeights<f32>;
pub type Weights64 = model::ModelWeights<f64>;
pub type Trace32 = model::ResidualTrace<f32>;
pub type Trace64 = model::ResidualTrace<f64>;
