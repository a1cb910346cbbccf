//! Dense row-major matrices and the few factorizations the crate needs.
//!
//! Everything is plain loops over `Vec<T>` with a fixed iteration order, so
//! repeated runs produce bitwise-identical results.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum relative asymmetry tolerated by [`solve_spd`].
const SYMMETRY_TOL: f64 = 1e-9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    /// Matrix with every entry set to `v`.
    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    /// Identity of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Build from a row-major buffer; the buffer length must match the shape.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "buffer of length {} cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from explicit rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::shape(format!(
                    "row {} has length {}, expected {}",
                    i,
                    row.len(),
                    c
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Borrow row `i` as a slice.
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable row access.
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Raw row-major buffer.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Matrix product with a fixed i,k,j loop order (per-entry accumulation
    /// runs over k in ascending order, so results are reproducible bitwise).
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Multiply every entry by `k`.
    pub fn scale(&self, k: T) -> Matrix<T> {
        self.map(|x| x * k)
    }

    /// Apply `f` to every entry.
    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Combine two equally-shaped matrices entrywise.
    pub fn zip_map(&self, other: &Matrix<T>, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "zip of {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Largest entry magnitude (zero for an empty matrix).
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Mean of the diagonal; requires a square nonempty matrix.
    pub fn mean_diag(&self) -> Result<T> {
        if self.rows != self.cols || self.rows == 0 {
            return Err(Error::shape(format!("mean_diag of {}x{}", self.rows, self.cols)));
        }
        let mut s = T::zero();
        for i in 0..self.rows {
            s += self[(i, i)];
        }
        Ok(s / T::of(self.rows as f64))
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T: Scalar> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of `a`, or `None` when a pivot is not
/// strictly positive (or goes non-finite).
fn cholesky<T: Scalar>(a: &Matrix<T>) -> Option<Matrix<T>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[(i, j)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solve `A X = B` for symmetric positive-definite `A` via Cholesky.
///
/// `A` must be square and symmetric to within a relative tolerance of 1e-9;
/// otherwise a contract error is returned. If factorization fails, the solve
/// is retried with `jitter`, `10 * jitter`, and `100 * jitter` added to the
/// diagonal before giving up with a singularity error. The inverse of `A` is
/// never formed explicitly.
pub fn solve_spd<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, jitter: T) -> Result<Matrix<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(format!("solve_spd needs a square A, got {}x{}", a.rows(), a.cols())));
    }
    if b.rows() != n {
        return Err(Error::shape(format!(
            "solve_spd rhs has {} rows, expected {}",
            b.rows(),
            n
        )));
    }
    let scale = a.max_abs().max(T::one());
    for i in 0..n {
        for j in 0..i {
            let d = (a[(i, j)] - a[(j, i)]).abs();
            if d > T::of(SYMMETRY_TOL) * scale {
                return Err(Error::contract(format!(
                    "solve_spd requires a symmetric matrix; |A[{i},{j}] - A[{j},{i}]| = {:e}",
                    d.lossy()
                )));
            }
        }
    }

    let mut shift = T::zero();
    let mut l = None;
    for attempt in 0..4 {
        let shifted = if shift == T::zero() {
            a.clone()
        } else {
            let mut s = a.clone();
            for i in 0..n {
                s[(i, i)] += shift;
            }
            s
        };
        l = cholesky(&shifted);
        if l.is_some() {
            break;
        }
        shift = jitter * T::of(10f64.powi(attempt));
    }
    let l = l.ok_or_else(|| {
        Error::Singular(format!(
            "Cholesky failed after jitter retries up to {:e}; the system is not positive definite \
             (for kernel systems, a larger regularizer helps)",
            shift.lossy()
        ))
    })?;

    // Forward/back substitution, column by column of B.
    let m = b.cols();
    let mut x = Matrix::zeros(n, m);
    let mut y = vec![T::zero(); n];
    for c in 0..m {
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    if !x.all_finite() {
        return Err(Error::Singular("solve_spd produced non-finite entries".into()));
    }
    Ok(x)
}

/// Affinely rescale all entries into `[0, 1]`; a constant matrix maps to zeros.
pub fn minmax_normalize<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &x in a.as_slice() {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = hi - lo;
    if !(range > T::zero()) {
        return Matrix::zeros(a.rows(), a.cols());
    }
    a.map(|x| (x - lo) / range)
}
