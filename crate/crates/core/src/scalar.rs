//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for matrices, kernels, and training math.
///
/// Implemented for `f32` and `f64`. Gradient checking and the acceptance
/// tolerances assume `f64`; `f32` is supported for the math layer itself.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from an `f64` literal (config values, tolerances, constants).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion from finite f64")
    }

    /// Conversion to `f64` for reporting and serialization.
    fn lossy(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
