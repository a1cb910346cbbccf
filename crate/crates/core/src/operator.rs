//! Conditional weighting operator.
//!
//! From a Gram matrix `K_Z` over conditioning values, the operator builds
//! `W = (K_Z + lambda I)^{-1} K_Z` via an SPD solve (the inverse is never
//! formed). Column `i` of `W` holds the weights that turn batch scores into a
//! conditional similarity estimate for anchor `i`:
//! `diag_i = sum_j K_XY[i][j] * W[j][i]`, floored at a small epsilon before it
//! reaches any logarithm. `W` is treated as a constant by every gradient path.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{minmax_normalize, solve_spd, Matrix};
use crate::scalar::Scalar;

/// Regularizer for the operator solve: fixed, or scaled off the kernel matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda<T> {
    /// `1e-3 * mean(diag(K_Z))`, which tracks the kernel's overall scale.
    Auto,
    Fixed(T),
}

/// Relative factor used by [`Lambda::Auto`].
pub const AUTO_LAMBDA_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct OperatorConfig<T> {
    pub lambda: Lambda<T>,
    /// Floor applied to conditional similarities before logs.
    pub clamp_eps: T,
}

impl<T: Scalar> Default for OperatorConfig<T> {
    fn default() -> Self {
        OperatorConfig { lambda: Lambda::Auto, clamp_eps: T::of(1e-8) }
    }
}

impl<T: Scalar> OperatorConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= T::zero()) || !l.is_finite() {
                return Err(Error::Config(format!(
                    "operator.lambda must be a finite value >= 0, got {l}"
                )));
            }
        }
        if !(self.clamp_eps > T::zero()) || self.clamp_eps > T::of(1e-3) {
            return Err(Error::Config(format!(
                "operator.clamp_eps must lie in (0, 1e-3], got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }

    /// Resolve the regularizer against a concrete kernel matrix.
    pub fn resolve_lambda(&self, kz: &Matrix<T>) -> Result<T> {
        match self.lambda {
            Lambda::Fixed(l) => Ok(l),
            Lambda::Auto => Ok(T::of(AUTO_LAMBDA_FACTOR) * kz.mean_diag()?),
        }
    }

    /// Config-file spelling of the regularizer, for report echoes.
    pub fn lambda_echo(&self) -> String {
        match self.lambda {
            Lambda::Auto => "auto".into(),
            Lambda::Fixed(l) => format!("{l}"),
        }
    }
}

/// Per-anchor conditional weights; column `i` weights the scores of anchor `i`.
#[derive(Debug, Clone)]
pub struct ConditionalWeights<T> {
    pub w: Matrix<T>,
    /// The regularizer that was actually used (after `Auto` resolution).
    pub lambda: T,
}

/// Solve `(K_Z + lambda I) W = K_Z`.
///
/// `kz` must be square and symmetric. With `lambda = 0` the kernel matrix
/// itself must be invertible, otherwise the solve reports a singular system.
pub fn conditional_weights<T: Scalar>(
    kz: &Matrix<T>,
    cfg: &OperatorConfig<T>,
) -> Result<ConditionalWeights<T>> {
    cfg.validate()?;
    if kz.rows() != kz.cols() || kz.rows() == 0 {
        return Err(Error::shape(format!(
            "conditional weights need a square nonempty kernel, got {}x{}",
            kz.rows(),
            kz.cols()
        )));
    }
    let lambda = cfg.resolve_lambda(kz)?;
    let n = kz.rows();
    let mut a = kz.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let jitter = T::of(1e-12) * (kz.mean_diag()?.abs() + lambda + T::one());
    let w = solve_spd(&a, kz, jitter)?;
    Ok(ConditionalWeights { w, lambda })
}

/// Conditional similarity estimates `diag_i = max(sum_j K_XY[i][j] W[j][i], eps)`
/// as a `b x 1` column, computed on plain values.
pub fn conditional_similarity<T: Scalar>(
    kxy: &Matrix<T>,
    weights: &ConditionalWeights<T>,
    cfg: &OperatorConfig<T>,
) -> Result<Matrix<T>> {
    cfg.validate()?;
    let b = kxy.rows();
    if kxy.cols() != b || weights.w.shape() != (b, b) {
        return Err(Error::shape(format!(
            "conditional similarity needs matching square shapes, got {}x{} scores and {}x{} weights",
            kxy.rows(),
            kxy.cols(),
            weights.w.rows(),
            weights.w.cols()
        )));
    }
    let mut out = Matrix::zeros(b, 1);
    for i in 0..b {
        let mut s = T::zero();
        for j in 0..b {
            s += kxy[(i, j)] * weights.w[(j, i)];
        }
        out[(i, 0)] = s.max(cfg.clamp_eps);
    }
    Ok(out)
}

/// Tape counterpart of [`conditional_similarity`]: differentiable through the
/// score gram only. The weights enter as a constant, and the floor is the
/// relu composite `relu(x - eps) + eps`, whose gradient vanishes below `eps`.
pub fn conditional_similarity_var<T: Scalar>(
    tape: &mut Tape<T>,
    kxy: Var,
    weights: &ConditionalWeights<T>,
    cfg: &OperatorConfig<T>,
) -> Result<Var> {
    cfg.validate()?;
    let (b, c) = kxy.shape();
    if c != b || weights.w.shape() != (b, b) {
        return Err(Error::shape(format!(
            "conditional similarity needs matching square shapes, got {b}x{c} scores and {}x{} weights",
            weights.w.rows(),
            weights.w.cols()
        )));
    }
    let wv = tape.constant(weights.w.clone());
    let kw = tape.matmul(kxy, wv)?;
    let d = tape.diag(kw)?;
    clamp_min(tape, d, cfg.clamp_eps)
}

/// Floor every entry of `x` at `floor` using the relu composite.
pub fn clamp_min<T: Scalar>(tape: &mut Tape<T>, x: Var, floor: T) -> Result<Var> {
    let down = tape.constant(Matrix::filled(1, 1, -floor));
    let shifted = tape.add(x, down)?;
    let r = tape.relu(shifted);
    let up = tape.constant(Matrix::filled(1, 1, floor));
    tape.add(r, up)
}

/// Min-max normalized views of the conditional weights and the raw kernel,
/// for side-by-side smoothing inspection.
pub fn inspect_smoothing<T: Scalar>(
    kz: &Matrix<T>,
    cfg: &OperatorConfig<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let weights = conditional_weights(kz, cfg)?;
    Ok((minmax_normalize(&weights.w), minmax_normalize(kz)))
}
