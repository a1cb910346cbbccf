//! Similarity kernels: the exponentiated-cosine score gram between embedding
//! batches (differentiable, recorded on the tape) and the Gram matrix over
//! conditioning values (plain data, never differentiated).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Epsilon guard in the cosine kernel denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// Temperature for the score gram.
#[derive(Debug, Clone, Copy)]
pub struct ScoreConfig<T> {
    pub tau: T,
}

impl<T: Scalar> ScoreConfig<T> {
    /// Temperature must be strictly positive.
    pub fn new(tau: T) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Config(format!("loss.tau must be positive, got {tau}")));
        }
        Ok(ScoreConfig { tau })
    }
}

impl<T: Scalar> Default for ScoreConfig<T> {
    fn default() -> Self {
        ScoreConfig { tau: T::of(0.5) }
    }
}

/// Kernel family over conditioning values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rbf,
    Laplacian,
    Linear,
    Cosine,
    Polynomial,
    /// Exact-match kernel: 1 when two rows are bitwise equal, else 0.
    Delta,
}

impl KernelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelKind::Rbf),
            "laplacian" => Ok(KernelKind::Laplacian),
            "linear" => Ok(KernelKind::Linear),
            "cosine" => Ok(KernelKind::Cosine),
            "polynomial" => Ok(KernelKind::Polynomial),
            "delta" => Ok(KernelKind::Delta),
            other => Err(Error::Config(format!("unknown kernel.kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Rbf => "rbf",
            KernelKind::Laplacian => "laplacian",
            KernelKind::Linear => "linear",
            KernelKind::Cosine => "cosine",
            KernelKind::Polynomial => "polynomial",
            KernelKind::Delta => "delta",
        }
    }
}

/// RBF bandwidth: fixed, or the median heuristic resolved per batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth<T> {
    Median,
    Fixed(T),
}

/// Full kernel description for the conditioning variable.
#[derive(Debug, Clone, Copy)]
pub struct KernelSpec<T> {
    pub kind: KernelKind,
    /// RBF squared bandwidth.
    pub sigma2: Bandwidth<T>,
    /// Laplacian length-scale.
    pub gamma: T,
    /// Polynomial degree.
    pub degree: u32,
    /// Polynomial offset.
    pub coef: T,
}

impl<T: Scalar> Default for KernelSpec<T> {
    fn default() -> Self {
        KernelSpec {
            kind: KernelKind::Rbf,
            sigma2: Bandwidth::Median,
            gamma: T::one(),
            degree: 3,
            coef: T::one(),
        }
    }
}

impl<T: Scalar> KernelSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.sigma2 {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(Error::Config(format!("kernel.sigma2 must be positive, got {s}")));
            }
        }
        if !(self.gamma > T::zero()) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("kernel.gamma must be positive, got {}", self.gamma)));
        }
        if self.degree == 0 {
            return Err(Error::Config("kernel.degree must be at least 1".into()));
        }
        if !self.coef.is_finite() {
            return Err(Error::Config(format!("kernel.coef must be finite, got {}", self.coef)));
        }
        Ok(())
    }

    /// Config-file spelling of the bandwidth, for report echoes.
    pub fn sigma2_echo(&self) -> String {
        match self.sigma2 {
            Bandwidth::Median => "median".into(),
            Bandwidth::Fixed(s) => format!("{s}"),
        }
    }
}

/// Pairwise score gram `K[i][j] = exp(cos(u_i, v_j) / tau)`, recorded on the
/// tape so gradients flow into both embedding batches.
///
/// `u` and `v` must have the same embedding width; rows are L2-normalized
/// internally (with the usual epsilon guard). All entries land in
/// `[exp(-1/tau), exp(1/tau)]`.
pub fn score_gram<T: Scalar>(tape: &mut Tape<T>, u: Var, v: Var, cfg: &ScoreConfig<T>) -> Result<Var> {
    if u.shape().1 != v.shape().1 {
        return Err(Error::shape(format!(
            "score_gram embedding widths differ: {} vs {}",
            u.shape().1,
            v.shape().1
        )));
    }
    if u.shape().0 == 0 || v.shape().0 == 0 {
        return Err(Error::contract("score_gram needs at least one row per side"));
    }
    ScoreConfig::new(cfg.tau)?;
    let un = tape.row_normalize(u);
    let vn = tape.row_normalize(v);
    let vt = tape.transpose(vn);
    let cos = tape.matmul(un, vt)?;
    let scaled = tape.scalar_mul(cos, T::one() / cfg.tau);
    Ok(tape.exp(scaled))
}

/// Score gram as a plain matrix (scratch tape, no gradients).
pub fn score_gram_values<T: Scalar>(u: &Matrix<T>, v: &Matrix<T>, cfg: &ScoreConfig<T>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let vv = tape.constant(v.clone());
    let k = score_gram(&mut tape, uv, vv, cfg)?;
    Ok(tape.value(k).clone())
}

/// Median of the pairwise squared Euclidean distances (over unordered pairs
/// `i < j`). Falls back to 1 when the median is zero; needs at least two rows.
pub fn median_bandwidth<T: Scalar>(z: &Matrix<T>) -> Result<T> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::contract(format!(
            "median bandwidth needs at least 2 rows, got {n}"
        )));
    }
    let mut d2: Vec<T> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2.push(sq_dist(z.row(i), z.row(j)));
        }
    }
    d2.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = d2.len();
    let med = if m % 2 == 1 {
        d2[m / 2]
    } else {
        (d2[m / 2 - 1] + d2[m / 2]) / T::of(2.0)
    };
    if med > T::zero() {
        Ok(med)
    } else {
        Ok(T::one())
    }
}

/// Gram matrix of `spec`'s kernel over the rows of `z`. Symmetric by
/// construction: entries are computed once per unordered pair and mirrored.
pub fn z_gram<T: Scalar>(z: &Matrix<T>, spec: &KernelSpec<T>) -> Result<Matrix<T>> {
    spec.validate()?;
    let n = z.rows();
    if n == 0 {
        return Err(Error::contract("z_gram needs at least one row"));
    }
    let sigma2 = match (spec.kind, spec.sigma2) {
        (KernelKind::Rbf, Bandwidth::Median) => median_bandwidth(z)?,
        (KernelKind::Rbf, Bandwidth::Fixed(s)) => s,
        _ => T::one(), // unused by the other kinds
    };
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel_entry(z.row(i), z.row(j), spec, sigma2);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

fn kernel_entry<T: Scalar>(a: &[T], b: &[T], spec: &KernelSpec<T>, sigma2: T) -> T {
    match spec.kind {
        KernelKind::Rbf => {
            let d2 = sq_dist(a, b);
            (-d2 / (T::of(2.0) * sigma2)).exp()
        }
        KernelKind::Laplacian => {
            let mut l1 = T::zero();
            for (x, y) in a.iter().zip(b) {
                l1 += (*x - *y).abs();
            }
            (-spec.gamma * l1).exp()
        }
        KernelKind::Linear => dot(a, b),
        KernelKind::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            dot(a, b) / (na * nb + T::of(COSINE_EPS))
        }
        KernelKind::Polynomial => {
            let base = dot(a, b) + spec.coef;
            num_traits::Float::powi(base, spec.degree as i32)
        }
        KernelKind::Delta => {
            let eq = a
                .iter()
                .zip(b)
                .all(|(x, y)| x.lossy().to_bits() == y.lossy().to_bits());
            if eq {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        s += d * d;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = Matrix<f64>;

    fn spec(kind: KernelKind) -> KernelSpec<f64> {
        KernelSpec { kind, ..KernelSpec::default() }
    }

    #[test]
    fn score_gram_opposite_unit_vectors() {
        // cos = -1 at tau = 0.5 gives exp(-2).
        let u = M::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let v = M::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        let k = score_gram_values(&u, &v, &ScoreConfig::new(0.5).unwrap()).unwrap();
        assert!((k[(0, 0)] - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn score_gram_diagonal_of_identical_batches() {
        let u = M::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let cfg = ScoreConfig::new(0.5).unwrap();
        let k = score_gram_values(&u, &u, &cfg).unwrap();
        for i in 0..2 {
            assert!((k[(i, i)] - 2.0f64.exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn score_gram_rejects_nonpositive_tau() {
        assert!(ScoreConfig::new(0.0).is_err());
        assert!(ScoreConfig::new(-1.0).is_err());
    }

    #[test]
    fn median_bandwidth_small_oracle() {
        // Points 0, 1, 3 on the line: squared distances {1, 9, 4}, median 4.
        let z = M::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(median_bandwidth(&z).unwrap(), 4.0);
    }

    #[test]
    fn median_bandwidth_identical_points_falls_back_to_one() {
        let z = M::filled(4, 2, 0.7);
        assert_eq!(median_bandwidth(&z).unwrap(), 1.0);
    }

    #[test]
    fn median_bandwidth_needs_two_rows() {
        let z = M::filled(1, 2, 0.0);
        assert!(median_bandwidth(&z).is_err());
    }

    #[test]
    fn rbf_gram_unit_diagonal_and_decay() {
        let z = M::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let k = z_gram(&z, &spec(KernelKind::Rbf)).unwrap();
        for i in 0..3 {
            assert_eq!(k[(i, i)], 1.0);
        }
        // sigma2 = median = 4, so K[0][1] = exp(-1/8).
        assert!((k[(0, 1)] - (-1.0f64 / 8.0).exp()).abs() < 1e-12);
        assert!(k[(0, 2)] < k[(0, 1)]);
    }

    #[test]
    fn linear_gram_is_inner_product() {
        let z = M::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let k = z_gram(&z, &spec(KernelKind::Linear)).unwrap();
        assert_eq!(k[(0, 0)], 5.0);
        assert_eq!(k[(0, 1)], 1.0);
        assert_eq!(k[(1, 1)], 10.0);
    }

    #[test]
    fn polynomial_degree_one_zero_coef_matches_linear() {
        let z = M::from_rows(&[vec![0.5, -0.2], vec![1.5, 0.8], vec![-0.3, 0.1]]).unwrap();
        let mut p = spec(KernelKind::Polynomial);
        p.degree = 1;
        p.coef = 0.0;
        let kp = z_gram(&z, &p).unwrap();
        let kl = z_gram(&z, &spec(KernelKind::Linear)).unwrap();
        assert_eq!(kp, kl);
    }

    #[test]
    fn cosine_gram_diagonal_and_zero_row() {
        let z = M::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let k = z_gram(&z, &spec(KernelKind::Cosine)).unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(k.all_finite());
        assert_eq!(k[(1, 1)], 0.0); // degenerate zero row, guarded not NaN
    }

    #[test]
    fn laplacian_gram_matches_closed_form() {
        let z = M::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let mut s = spec(KernelKind::Laplacian);
        s.gamma = 0.5;
        let k = z_gram(&z, &s).unwrap();
        assert!((k[(0, 1)] - (-1.5f64).exp()).abs() < 1e-12);
        assert_eq!(k[(0, 0)], 1.0);
    }

    #[test]
    fn delta_gram_partitions_exact_groups() {
        let z = M::from_rows(&[vec![0.0], vec![0.0], vec![1.0]]).unwrap();
        let k = z_gram(&z, &spec(KernelKind::Delta)).unwrap();
        let expect = M::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(k, expect);
    }

    #[test]
    fn gram_rejects_invalid_spec() {
        let z = M::filled(2, 1, 0.0);
        let mut bad = spec(KernelKind::Rbf);
        bad.sigma2 = Bandwidth::Fixed(-1.0);
        assert!(z_gram(&z, &bad).is_err());
        let mut bad = spec(KernelKind::Polynomial);
        bad.degree = 0;
        assert!(z_gram(&z, &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn z_gram_is_exactly_symmetric(values in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let z = M::from_vec(4, 3, values).unwrap();
            for kind in [KernelKind::Rbf, KernelKind::Laplacian, KernelKind::Linear,
                         KernelKind::Cosine, KernelKind::Polynomial, KernelKind::Delta] {
                let k = z_gram(&z, &spec(kind)).unwrap();
                for i in 0..4 {
                    for j in 0..4 {
                        prop_assert_eq!(k[(i, j)].to_bits(), k[(j, i)].to_bits());
                    }
                }
            }
        }

        #[test]
        fn score_entries_stay_in_band(values in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let u = M::from_vec(4, 2, values[..8].to_vec()).unwrap();
            let v = M::from_vec(4, 2, values[8..].to_vec()).unwrap();
            let tau = 0.7;
            let k = score_gram_values(&u, &v, &ScoreConfig::new(tau).unwrap()).unwrap();
            let lo = (-1.0 / tau as f64).exp() - 1e-12;
            let hi = (1.0 / tau as f64).exp() + 1e-12;
            for &x in k.as_slice() {
                prop_assert!(x >= lo && x <= hi, "entry {} outside [{}, {}]", x, lo, hi);
            }
        }
    }
}
