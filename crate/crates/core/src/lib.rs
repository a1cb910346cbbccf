//! Conditional contrastive learning with kernel-smoothed conditioning.
//!
//! The crate estimates conditional similarity scores without explicit
//! conditional sampling: a Gram matrix over the conditioning variable is
//! turned into per-anchor weights via a regularized solve, and those weights
//! replace the empirical conditional mean inside contrastive objectives.
//! Everything is built on a small dense-matrix layer and a reverse-mode tape
//! so gradients can be checked against finite differences.
//!
//! The numeric core is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`); the training stack and CLI run at `f64`.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod operator;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for training and the CLI.
pub type F = f64;
/// Dense matrix at the default precision.
pub type Mat = linalg::Matrix<f64>;
/// Dense matrix at single precision.
pub type Mat32 = linalg::Matrix<f32>;
