//! Piece-wise linear networks, trained from scratch, together with the
//! measurements that relate their input-space smoothness to parameter-space
//! curvature: empirical Lipschitz constants, spectral upper bounds, Hessian
//! trace and extremes, gradient-noise covariance, and numerical certificates
//! for the gradient inequalities that tie them together.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the 64-bit configuration used by the probes, the
//! checkpoints and the sweep harness.

pub mod bounds;
pub mod data;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod nn;
mod par;
pub mod probes;
pub mod rng;
mod scalar;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vec64 = Vec<f64>;
pub type Mat64 = linalg::Mat<f64>;
pub type Network64 = nn::Network<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type ActivationTrace64 = nn::ActivationTrace<f64>;
pub type Network32 = nn::Network<f32>;
