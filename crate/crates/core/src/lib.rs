//! Debiased confidence intervals for demand functions learned from
//! adaptively collected pricing data.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! experiment harness runs in `f64`.

pub mod demand;
pub mod env;
pub mod estimator;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod scalar;
pub mod whitening;

pub use scalar::Scalar;

pub type ModelSpec64 = demand::ModelSpec<f64>;
pub type ModelSpec32 = demand::ModelSpec<f32>;
pub type History64 = env::History<f64>;
pub type History32 = env::History<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type WhiteningMatrix64 = whitening::WhiteningMatrix<f64>;
pub type WhiteningMatrix32 = whitening::WhiteningMatrix<f32>;
pub type ConfidenceBand64 = inference::ConfidenceBand<f64>;
pub type ConfidenceBand32 = inference::ConfidenceBand<f32>;
