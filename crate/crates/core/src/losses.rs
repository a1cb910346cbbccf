//! Contrastive objectives over a batch of paired embeddings.
//!
//! All losses share the same skeleton: build the score gram
//! `K[i][j] = exp(cos(u_i, v_j)/tau)` on the tape, assemble per-sample log
//! ratio terms from it, and average. The `*_cclk` variants replace explicit
//! conditional sampling with the kernel-weighted conditional similarity from
//! [`crate::operator`]; the `*_infonce` variants are the discrete baselines
//! that need exact-match groups (and fail, by design, when a group has no
//! partner to offer).
//!
//! Sign convention: `objective` is maximized, `loss = -objective` is what the
//! trainer minimizes; `per_sample` holds the individual log terms.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{score_gram, z_gram, KernelSpec, ScoreConfig};
use crate::linalg::Matrix;
use crate::operator::{clamp_min, conditional_similarity_var, conditional_weights, OperatorConfig};
use crate::scalar::Scalar;

/// Floor applied to every logarithm argument in the loss layer.
pub const LOG_FLOOR: f64 = 1e-12;

/// Loss selector, mirroring the `loss.kind` config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Infonce,
    WeaksupCclk,
    FairCclk,
    HardnegCclk,
    WeaksupInfonce,
    FairInfonce,
    HardnegInfonce,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LossKind::Infonce),
            "weaksup_cclk" => Ok(LossKind::WeaksupCclk),
            "fair_cclk" => Ok(LossKind::FairCclk),
            "hardneg_cclk" => Ok(LossKind::HardnegCclk),
            "weaksup_infonce" => Ok(LossKind::WeaksupInfonce),
            "fair_infonce" => Ok(LossKind::FairInfonce),
            "hardneg_infonce" => Ok(LossKind::HardnegInfonce),
            other => Err(Error::Config(format!("unknown loss.kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Infonce => "infonce",
            LossKind::WeaksupCclk => "weaksup_cclk",
            LossKind::FairCclk => "fair_cclk",
            LossKind::HardnegCclk => "hardneg_cclk",
            LossKind::WeaksupInfonce => "weaksup_infonce",
            LossKind::FairInfonce => "fair_infonce",
            LossKind::HardnegInfonce => "hardneg_infonce",
        }
    }

    /// True for the kinds that consult the conditioning variable `z`.
    pub fn uses_z(&self) -> bool {
        matches!(
            self,
            LossKind::WeaksupCclk | LossKind::FairCclk | LossKind::WeaksupInfonce | LossKind::FairInfonce
        )
    }
}

/// Result of evaluating a loss on one batch.
#[derive(Debug)]
pub struct LossValue<T> {
    /// Mean per-sample term; the quantity being maximized.
    pub objective: Var,
    /// `-objective`; the quantity gradient descent minimizes.
    pub loss: Var,
    /// Individual log terms, one per anchor.
    pub per_sample: Vec<T>,
}

impl<T: Scalar> LossValue<T> {
    pub fn loss_value(&self, tape: &Tape<T>) -> T {
        tape.value(self.loss)[(0, 0)]
    }

    pub fn objective_value(&self, tape: &Tape<T>) -> T {
        tape.value(self.objective)[(0, 0)]
    }
}

/// Loss selection plus the scalar knobs shared across kinds.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<T> {
    pub kind: LossKind,
    pub score: ScoreConfig<T>,
    /// Concentration of the hard-negative importance weights.
    pub beta: T,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig { kind: LossKind::Infonce, score: ScoreConfig::default(), beta: T::one() }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        ScoreConfig::new(self.score.tau)?;
        if !(self.beta >= T::zero()) || !self.beta.is_finite() {
            return Err(Error::Config(format!("loss.beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Dispatch a batch through the configured loss.
///
/// `z` is consulted only by the kinds that condition on it; `pos_seed` only by
/// the weakly-supervised discrete baseline (it draws the positive partners).
pub fn compute<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &LossConfig<T>,
    u: Var,
    v: Var,
    z: &Matrix<T>,
    kernel: &KernelSpec<T>,
    op: &OperatorConfig<T>,
    pos_seed: u64,
) -> Result<LossValue<T>> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::Infonce => infonce(tape, u, v, &cfg.score),
        LossKind::WeaksupCclk => weaksup_cclk(tape, u, v, z, &cfg.score, kernel, op),
        LossKind::FairCclk => fair_cclk(tape, u, v, z, &cfg.score, kernel, op),
        LossKind::HardnegCclk => hardneg_cclk(tape, u, v, &cfg.score, kernel, op),
        LossKind::WeaksupInfonce => weaksup_infonce_discrete(tape, u, v, z, &cfg.score, pos_seed),
        LossKind::FairInfonce => fair_infonce_discrete(tape, u, v, z, &cfg.score),
        LossKind::HardnegInfonce => hardneg_infonce_weighted(tape, u, v, &cfg.score, cfg.beta),
    }
}

/// Plain contrastive objective: `term_i = log(K_ii / sum_j K_ij)`.
pub fn infonce<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    score: &ScoreConfig<T>,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    let k = score_gram(tape, u, v, score)?;
    let d = tape.diag(k)?;
    let off = tape.offdiag_row_sums(k)?;
    let total = tape.add(d, off)?;
    let ld = safe_log(tape, d)?;
    let lt = safe_log(tape, total)?;
    let terms = sub(tape, ld, lt)?;
    finalize(tape, terms, b)
}

/// Weakly-supervised conditional objective: the positive score is the
/// kernel-conditional similarity `C_i`, the negatives stay unconditioned:
/// `term_i = log(C_i / (C_i + sum_{j != i} K_ij))`.
pub fn weaksup_cclk<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    z: &Matrix<T>,
    score: &ScoreConfig<T>,
    kernel: &KernelSpec<T>,
    op: &OperatorConfig<T>,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    check_z(z, b)?;
    let k = score_gram(tape, u, v, score)?;
    let kz = z_gram(z, kernel)?;
    let w = conditional_weights(&kz, op)?;
    let c = conditional_similarity_var(tape, k, &w, op)?;
    let off = tape.offdiag_row_sums(k)?;
    let den = tape.add(c, off)?;
    let lc = safe_log(tape, c)?;
    let ld = safe_log(tape, den)?;
    let terms = sub(tape, lc, ld)?;
    finalize(tape, terms, b)
}

/// Fairness-oriented conditional objective: the positive stays the paired
/// score, the negatives are replaced by the conditional similarity:
/// `term_i = log(K_ii / (K_ii + (b - 1) C_i))`.
pub fn fair_cclk<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    z: &Matrix<T>,
    score: &ScoreConfig<T>,
    kernel: &KernelSpec<T>,
    op: &OperatorConfig<T>,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    check_z(z, b)?;
    fair_core(tape, u, v, z, score, kernel, op)
}

/// Hard-negative conditional objective: identical in form to [`fair_cclk`]
/// but conditioned on the anchor embeddings themselves, taken as constants
/// (no gradient flows through the conditioning side).
pub fn hardneg_cclk<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    score: &ScoreConfig<T>,
    kernel: &KernelSpec<T>,
    op: &OperatorConfig<T>,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    let z = tape.value(u).clone(); // detached: same effect as stop_gradient
    check_z(&z, b)?;
    fair_core(tape, u, v, &z, score, kernel, op)
}

fn fair_core<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    z: &Matrix<T>,
    score: &ScoreConfig<T>,
    kernel: &KernelSpec<T>,
    op: &OperatorConfig<T>,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    let k = score_gram(tape, u, v, score)?;
    let kz = z_gram(z, kernel)?;
    let w = conditional_weights(&kz, op)?;
    let c = conditional_similarity_var(tape, k, &w, op)?;
    let d = tape.diag(k)?;
    let scaled = tape.scalar_mul(c, T::of((b - 1) as f64));
    let den = tape.add(d, scaled)?;
    let ld = safe_log(tape, d)?;
    let lden = safe_log(tape, den)?;
    let terms = sub(tape, ld, lden)?;
    finalize(tape, terms, b)
}

/// Discrete weakly-supervised baseline: the positive for anchor `i` is a
/// uniformly drawn same-group partner `p(i) != i` (seeded by `pos_seed`), so
/// `term_i = log(K[i][p(i)] / sum_j K_ij)`. Groups are exact matches on `z`;
/// any group of size one makes the draw impossible and is reported as an
/// insufficient-samples error.
pub fn weaksup_infonce_discrete<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    z: &Matrix<T>,
    score: &ScoreConfig<T>,
    pos_seed: u64,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    check_z(z, b)?;
    let (gid, groups) = exact_groups(z);
    fail_on_singletons(z, &gid, &groups)?;

    let mut rng = ChaCha12Rng::seed_from_u64(pos_seed);
    let mut select = Matrix::zeros(b, b);
    for i in 0..b {
        let members = &groups[gid[i]];
        // Candidates are the group minus the anchor itself, in row order.
        let pick = rng.gen_range(0..members.len() - 1);
        let mut seen = 0;
        for &j in members {
            if j == i {
                continue;
            }
            if seen == pick {
                select[(j, i)] = T::one();
                break;
            }
            seen += 1;
        }
    }

    let k = score_gram(tape, u, v, score)?;
    let sel = tape.constant(select);
    let ks = tape.matmul(k, sel)?;
    let pos = tape.diag(ks)?;
    let d = tape.diag(k)?;
    let off = tape.offdiag_row_sums(k)?;
    let total = tape.add(d, off)?;
    let lp = safe_log(tape, pos)?;
    let lt = safe_log(tape, total)?;
    let terms = sub(tape, lp, lt)?;
    finalize(tape, terms, b)
}

/// Discrete fairness baseline: negatives are restricted to the anchor's own
/// group, `term_i = log(K_ii / sum_{j: z_j = z_i} K_ij)`. Every group must
/// have at least two members to supply a negative.
pub fn fair_infonce_discrete<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    z: &Matrix<T>,
    score: &ScoreConfig<T>,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    check_z(z, b)?;
    let (gid, groups) = exact_groups(z);
    fail_on_singletons(z, &gid, &groups)?;

    let mut same = Matrix::zeros(b, b);
    for i in 0..b {
        for &j in &groups[gid[i]] {
            same[(j, i)] = T::one();
        }
    }
    let k = score_gram(tape, u, v, score)?;
    let g = tape.constant(same);
    let kg = tape.matmul(k, g)?;
    let den = tape.diag(kg)?;
    let d = tape.diag(k)?;
    let ld = safe_log(tape, d)?;
    let lden = safe_log(tape, den)?;
    let terms = sub(tape, ld, lden)?;
    finalize(tape, terms, b)
}

/// Hard-negative baseline with importance weights: negatives are reweighted
/// in proportion to `exp(beta * cos(u_i, v_j))`, normalized over `j != i` and
/// scaled back to `b - 1` effective negatives:
/// `term_i = log(K_ii / (K_ii + (b-1) * sum_{j != i} q_ij K_ij))`.
///
/// With `beta = 0` the weights are uniform and the loss coincides with
/// [`infonce`]. The weights are part of the objective, so gradients flow
/// through them.
pub fn hardneg_infonce_weighted<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    v: Var,
    score: &ScoreConfig<T>,
    beta: T,
) -> Result<LossValue<T>> {
    let b = check_batch(u, v)?;
    if !(beta >= T::zero()) || !beta.is_finite() {
        return Err(Error::Config(format!("loss.beta must be >= 0, got {beta}")));
    }
    ScoreConfig::new(score.tau)?;
    let inv_tau = T::one() / score.tau;

    let un = tape.row_normalize(u);
    let vn = tape.row_normalize(v);
    let vt = tape.transpose(vn);
    let cos = tape.matmul(un, vt)?;

    // K_ii via the diagonal of the score gram.
    let scaled = tape.scalar_mul(cos, inv_tau);
    let k = tape.exp(scaled);
    let d = tape.diag(k)?;

    // A_i = sum_{j != i} exp((beta + 1/tau) cos_ij) = sum of weighted scores.
    let combined = tape.scalar_mul(cos, beta + inv_tau);
    let a_m = tape.exp(combined);
    let a = tape.offdiag_row_sums(a_m)?;

    // B_i = sum_{j != i} exp(beta cos_ij): the weight normalizer.
    let bcos = tape.scalar_mul(cos, beta);
    let b_m = tape.exp(bcos);
    let bsum = tape.offdiag_row_sums(b_m)?;

    // E_i = K_ii * B_i, assembled in exponent space so no elementwise product
    // is needed: exp(cos_ii / tau + beta cos_ij) summed over j != i.
    let dcos = tape.diag(cos)?;
    let dcol = tape.scalar_mul(dcos, inv_tau);
    let shifted = tape.add(bcos, dcol)?;
    let e_m = tape.exp(shifted);
    let e = tape.offdiag_row_sums(e_m)?;

    // log K_ii - log(K_ii B_i + (b-1) A_i) + log B_i
    let an = tape.scalar_mul(a, T::of((b - 1) as f64));
    let den = tape.add(e, an)?;
    let ld = safe_log(tape, d)?;
    let lden = safe_log(tape, den)?;
    let lb = safe_log(tape, bsum)?;
    let part = sub(tape, ld, lden)?;
    let terms = tape.add(part, lb)?;
    finalize(tape, terms, b)
}

/// Group rows of `z` by exact (bitwise) equality. Returns the group id of
/// each row plus the member lists, in first-appearance order.
pub fn exact_groups<T: Scalar>(z: &Matrix<T>) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut gid = Vec::with_capacity(z.rows());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..z.rows() {
        let key: Vec<u64> = z.row(i).iter().map(|x| x.lossy().to_bits()).collect();
        match keys.iter().position(|k| *k == key) {
            Some(g) => {
                gid.push(g);
                groups[g].push(i);
            }
            None => {
                gid.push(groups.len());
                keys.push(key);
                groups.push(vec![i]);
            }
        }
    }
    (gid, groups)
}

fn fail_on_singletons<T: Scalar>(
    z: &Matrix<T>,
    _gid: &[usize],
    groups: &[Vec<usize>],
) -> Result<()> {
    let mut offending = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        if members.len() < 2 {
            let row = members[0];
            offending.push(format!("group {} (z = {}, row {})", g, fmt_row(z.row(row)), row));
        }
    }
    if offending.is_empty() {
        Ok(())
    } else {
        Err(Error::InsufficientSamples { groups: offending })
    }
}

fn fmt_row<T: Scalar>(row: &[T]) -> String {
    let mut parts: Vec<String> = row.iter().take(6).map(|x| format!("{x}")).collect();
    if row.len() > 6 {
        parts.push("..".into());
    }
    format!("[{}]", parts.join(", "))
}

fn check_batch(u: Var, v: Var) -> Result<usize> {
    let (b, du) = u.shape();
    let (bv, dv) = v.shape();
    if b != bv || du != dv {
        return Err(Error::shape(format!(
            "paired batches must match, got {b}x{du} and {bv}x{dv}"
        )));
    }
    if b < 2 {
        return Err(Error::contract(format!("a contrastive batch needs at least 2 rows, got {b}")));
    }
    Ok(b)
}

fn check_z<T: Scalar>(z: &Matrix<T>, b: usize) -> Result<()> {
    if z.rows() != b {
        return Err(Error::shape(format!(
            "conditioning values have {} rows for a batch of {b}",
            z.rows()
        )));
    }
    if z.cols() == 0 {
        return Err(Error::contract("conditioning values need at least one column"));
    }
    Ok(())
}

/// `log(max(x, LOG_FLOOR))`, the only way logs enter the loss layer.
fn safe_log<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let clamped = clamp_min(tape, x, T::of(LOG_FLOOR))?;
    Ok(tape.log(clamped))
}

fn sub<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let nb = tape.scalar_mul(b, -T::one());
    tape.add(a, nb)
}

fn finalize<T: Scalar>(tape: &mut Tape<T>, terms: Var, b: usize) -> Result<LossValue<T>> {
    let per_sample: Vec<T> = (0..b).map(|i| tape.value(terms)[(i, 0)]).collect();
    let total = tape.sum(terms);
    let objective = tape.scalar_mul(total, T::one() / T::of(b as f64));
    let loss = tape.scalar_mul(objective, -T::one());
    Ok(LossValue { objective, loss, per_sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::kernels::{Bandwidth, KernelKind};
    use crate::operator::Lambda;

    type M = Matrix<f64>;

    fn tau(t: f64) -> ScoreConfig<f64> {
        ScoreConfig::new(t).unwrap()
    }

    fn delta() -> KernelSpec<f64> {
        KernelSpec { kind: KernelKind::Delta, ..KernelSpec::default() }
    }

    fn op_fixed(lambda: f64) -> OperatorConfig<f64> {
        OperatorConfig { lambda: Lambda::Fixed(lambda), ..OperatorConfig::default() }
    }

    /// Deterministic pseudo-random matrix for tests.
    fn pseudo(rows: usize, cols: usize, phase: f64) -> M {
        let mut m = M::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = ((i * cols + j) as f64 * 0.713 + phase).sin();
            }
        }
        m
    }

    fn eval<F>(f: F) -> (f64, Vec<f64>)
    where
        F: FnOnce(&mut Tape<f64>, Var, Var) -> Result<LossValue<f64>>,
    {
        let mut tape = Tape::new();
        let u = tape.leaf(pseudo(4, 3, 0.0), true);
        let v = tape.leaf(pseudo(4, 3, 1.3), true);
        let lv = f(&mut tape, u, v).unwrap();
        let loss = lv.loss_value(&tape);
        (loss, lv.per_sample)
    }

    #[test]
    fn infonce_identical_embeddings_hits_log_b() {
        // Every score equals e^{1/tau}, so each term is log(1/b).
        let rows = M::from_rows(&vec![vec![0.6, 0.8]; 5]).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let lv = infonce(&mut tape, u, v, &tau(0.5)).unwrap();
        let expect = -(5f64).ln();
        for &t in &lv.per_sample {
            assert!((t - expect).abs() < 1e-12, "term {t} vs {expect}");
        }
        assert!((lv.loss_value(&tape) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_orthogonal_pair_oracle() {
        // u = v = [e1; e2], tau = 1: K = [[e, 1], [1, e]],
        // term = log(e / (e + 1)).
        let rows = M::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let lv = infonce(&mut tape, u, v, &tau(1.0)).unwrap();
        let e = 1f64.exp();
        let expect = (e / (e + 1.0)).ln();
        for &t in &lv.per_sample {
            assert!((t - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weaksup_two_rows_identical_z_oracle() {
        // K = [[e, 1], [1, e]], K_Z = J_2, lambda = 1 give C_i = (e + 1)/3 and
        // term_i = log(C / (C + 1)) since the off-diagonal sum is 1.
        let rows = M::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let z = M::filled(2, 1, 0.7);
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let lv = weaksup_cclk(&mut tape, u, v, &z, &tau(1.0), &delta(), &op_fixed(1.0)).unwrap();
        let c = (1f64.exp() + 1.0) / 3.0;
        let expect = (c / (c + 1.0)).ln();
        for &t in &lv.per_sample {
            assert!((t - expect).abs() < 1e-12, "term {t} vs {expect}");
        }
    }

    #[test]
    fn fair_two_rows_identical_z_oracle() {
        // Same setup: term_i = log(e / (e + C)) with C = (e + 1)/3.
        let rows = M::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let z = M::filled(2, 1, 0.7);
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let lv = fair_cclk(&mut tape, u, v, &z, &tau(1.0), &delta(), &op_fixed(1.0)).unwrap();
        let e = 1f64.exp();
        let c = (e + 1.0) / 3.0;
        let expect = (e / (e + c)).ln();
        for &t in &lv.per_sample {
            assert!((t - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_reduces_weaksup_to_infonce() {
        // Distinct exact-match groups make K_Z the identity; with lambda = 0
        // the conditional similarity collapses onto the paired score.
        let u0 = pseudo(6, 4, 0.2);
        let v0 = pseudo(6, 4, 2.1);
        let z = M::from_rows(&(0..6).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();

        let mut t1 = Tape::new();
        let u = t1.leaf(u0.clone(), true);
        let v = t1.leaf(v0.clone(), true);
        let a = weaksup_cclk(&mut t1, u, v, &z, &tau(0.5), &delta(), &op_fixed(0.0)).unwrap();
        let la = a.loss_value(&t1);

        let mut t2 = Tape::new();
        let u = t2.leaf(u0, true);
        let v = t2.leaf(v0, true);
        let b = infonce(&mut t2, u, v, &tau(0.5)).unwrap();
        let lb = b.loss_value(&t2);
        assert!((la - lb).abs() <= 1e-12, "{la} vs {lb}");
    }

    #[test]
    fn lambda_zero_fair_equals_neg_log_b() {
        let u0 = pseudo(5, 3, 0.4);
        let v0 = pseudo(5, 3, 1.9);
        let z = M::from_rows(&(0..5).map(|i| vec![i as f64 * 2.0]).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(u0, true);
        let v = tape.leaf(v0, true);
        let lv = fair_cclk(&mut tape, u, v, &z, &tau(0.5), &delta(), &op_fixed(0.0)).unwrap();
        for &t in &lv.per_sample {
            assert!((t + 5f64.ln()).abs() <= 1e-10, "term {t}");
        }
    }

    #[test]
    fn hardneg_cclk_matches_fair_on_detached_anchors() {
        let u0 = pseudo(4, 3, 0.9);
        let v0 = pseudo(4, 3, 2.4);
        let spec = KernelSpec { kind: KernelKind::Rbf, sigma2: Bandwidth::Median, ..KernelSpec::default() };
        let cfg = op_fixed(0.5);

        let mut t1 = Tape::new();
        let u = t1.leaf(u0.clone(), true);
        let v = t1.leaf(v0.clone(), true);
        let h = hardneg_cclk(&mut t1, u, v, &tau(0.5), &spec, &cfg).unwrap();

        let mut t2 = Tape::new();
        let u = t2.leaf(u0.clone(), true);
        let v = t2.leaf(v0, true);
        let f = fair_cclk(&mut t2, u, v, &u0, &tau(0.5), &spec, &cfg).unwrap();

        assert_eq!(h.loss_value(&t1).to_bits(), f.loss_value(&t2).to_bits());
        for (a, b) in h.per_sample.iter().zip(&f.per_sample) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn weaksup_discrete_identical_embeddings() {
        // Two groups of two; all embeddings equal, so every score matches and
        // each term is log(1/b).
        let rows = M::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let z = M::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let lv = weaksup_infonce_discrete(&mut tape, u, v, &z, &tau(0.5), 7).unwrap();
        for &t in &lv.per_sample {
            assert!((t + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn weaksup_discrete_rejects_singleton_groups() {
        let rows = pseudo(3, 2, 0.1);
        let z = M::from_rows(&[vec![0.0], vec![0.0], vec![9.0]]).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let err = weaksup_infonce_discrete(&mut tape, u, v, &z, &tau(0.5), 7).unwrap_err();
        match err {
            Error::InsufficientSamples { groups } => {
                assert_eq!(groups.len(), 1);
                assert!(groups[0].contains("row 2"), "{}", groups[0]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fair_discrete_two_groups_oracle() {
        // Identical embeddings, two groups of size b/2: uniform within-group
        // scores give term = -log(b/2).
        let rows = M::from_rows(&vec![vec![0.6, 0.8]; 6]).unwrap();
        let z = M::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![1.0], vec![1.0], vec![1.0]])
            .unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let lv = fair_infonce_discrete(&mut tape, u, v, &z, &tau(0.5)).unwrap();
        for &t in &lv.per_sample {
            assert!((t + 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn fair_discrete_all_distinct_lists_every_group() {
        let rows = pseudo(4, 2, 0.5);
        let z = M::from_rows(&(0..4).map(|i| vec![i as f64 + 0.25]).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let err = fair_infonce_discrete(&mut tape, u, v, &z, &tau(0.5)).unwrap_err();
        match err {
            Error::InsufficientSamples { groups } => assert_eq!(groups.len(), 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn hardneg_weighted_beta_zero_is_infonce() {
        let (lh, _) = eval(|t, u, v| hardneg_infonce_weighted(t, u, v, &tau(0.5), 0.0));
        let (li, _) = eval(|t, u, v| infonce(t, u, v, &tau(0.5)));
        assert!((lh - li).abs() <= 1e-12, "{lh} vs {li}");
    }

    #[test]
    fn hardneg_weighted_identical_embeddings() {
        // All cosines equal, so the importance weights are uniform at any
        // beta and the value coincides with infonce: term = -log b.
        let rows = M::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(rows.clone(), true);
        let v = tape.leaf(rows, true);
        let lv = hardneg_infonce_weighted(&mut tape, u, v, &tau(0.5), 2.5).unwrap();
        for &t in &lv.per_sample {
            assert!((t + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_exact_negation_of_objective() {
        let mut tape = Tape::new();
        let u = tape.leaf(pseudo(4, 3, 0.0), true);
        let v = tape.leaf(pseudo(4, 3, 1.0), true);
        let lv = infonce(&mut tape, u, v, &tau(0.5)).unwrap();
        let o = lv.objective_value(&tape);
        let l = lv.loss_value(&tape);
        assert_eq!(l.to_bits(), (-o).to_bits());
        let mean: f64 = lv.per_sample.iter().sum::<f64>() / lv.per_sample.len() as f64;
        assert!((o - mean).abs() < 1e-15);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut tape = Tape::new();
        let u = tape.leaf(M::filled(1, 2, 0.5), true);
        let v = tape.leaf(M::filled(1, 2, 0.5), true);
        assert!(matches!(infonce(&mut tape, u, v, &tau(0.5)), Err(Error::Contract(_))));
    }

    #[test]
    fn weaksup_objective_never_gains_from_nongroup_offdiagonal() {
        // With the exact-match kernel, weights for anchors outside a group are
        // zero, so a foreign off-diagonal score appears only in the negative
        // sum: bumping it can only lower the objective.
        let z = M::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        let score = tau(0.5);
        let kz = z_gram(&z, &delta()).unwrap();
        let cfg = op_fixed(0.1);
        let w = conditional_weights(&kz, &cfg).unwrap();

        let objective_for = |k: &M| -> f64 {
            // Recompute the weaksup objective on raw score values.
            let b = k.rows();
            let mut total = 0.0;
            for i in 0..b {
                let mut c = 0.0;
                for j in 0..b {
                    c += k[(i, j)] * w.w[(j, i)];
                }
                let c = c.max(1e-8);
                let s: f64 = (0..b).filter(|&j| j != i).map(|j| k[(i, j)]).sum();
                total += (c / (c + s)).ln();
            }
            total / b as f64
        };

        let u0 = pseudo(4, 3, 0.3);
        let v0 = pseudo(4, 3, 1.7);
        let base = crate::kernels::score_gram_values(&u0, &v0, &score).unwrap();
        // Rows 0,1 form a group; column 2 is outside it.
        let mut bumped = base.clone();
        bumped[(0, 2)] += 0.05;
        assert!(objective_for(&bumped) < objective_for(&base));
    }

    // Gradient checks for the differentiable losses, directly on the
    // embedding matrices. The conditioning input is held fixed, which is
    // exactly the regime the recorded gradients describe.
    #[test]
    fn grad_check_all_differentiable_losses() {
        let u0 = pseudo(4, 3, 0.6);
        let v0 = pseudo(4, 3, 1.1);
        let z = M::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        let zc = z.clone();
        let spec = delta();
        let rbf = KernelSpec::<f64>::default();
        let cfg = op_fixed(0.2);
        let score = tau(0.5);

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>)> = vec![
            ("infonce", Box::new(move |t, vs| Ok(infonce(t, vs[0], vs[1], &score)?.loss))),
            (
                "weaksup_cclk",
                Box::new(move |t, vs| {
                    Ok(weaksup_cclk(t, vs[0], vs[1], &z, &score, &spec, &cfg)?.loss)
                }),
            ),
            (
                "fair_cclk",
                Box::new(move |t, vs| Ok(fair_cclk(t, vs[0], vs[1], &zc, &score, &rbf, &cfg)?.loss)),
            ),
            (
                "hardneg_infonce",
                Box::new(move |t, vs| Ok(hardneg_infonce_weighted(t, vs[0], vs[1], &score, 1.0)?.loss)),
            ),
        ];
        for (name, f) in cases {
            let err = grad_check(f, &[u0.clone(), v0.clone()], 1e-5).unwrap();
            assert!(err <= 1e-6, "{name}: relative error {err}");
        }
    }

    // The hard-negative conditional loss differentiates only the score side;
    // its gradient is the fair loss gradient at the frozen conditioning
    // values, so that is what finite differences must be compared against.
    #[test]
    fn grad_check_hardneg_cclk_at_frozen_conditioning() {
        let u0 = pseudo(4, 3, 0.6);
        let v0 = pseudo(4, 3, 1.1);
        let z0 = u0.clone();
        let rbf = KernelSpec::<f64>::default();
        let cfg = op_fixed(0.2);
        let score = tau(0.5);
        let err = grad_check(
            move |t, vs| Ok(fair_cclk(t, vs[0], vs[1], &z0, &score, &rbf, &cfg)?.loss),
            &[u0, v0],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }
}
