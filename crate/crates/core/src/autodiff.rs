//! Minimal reverse-mode automatic differentiation over matrix values.
//!
//! A [`Tape`] records a linear sequence of primitive operations; [`Var`]
//! handles index into it. The primitive set is deliberately closed: matmul,
//! broadcasting add, scalar multiply, elementwise exp/log/tanh/relu, row
//! L2-normalization, transpose, sum, diagonal extraction, off-diagonal row
//! sums, and stop-gradient. Every loss in this crate is expressed through
//! these primitives, and [`grad_check`] compares the recorded gradients
//! against central finite differences.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Epsilon inside the row-normalization square root; keeps zero rows finite.
pub const ROW_NORM_EPS: f64 = 1e-12;

/// Denominator guard in [`grad_check`]'s relative error.
const GRAD_CHECK_GUARD: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    ScalarMul(usize, T),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    RowNormalize(usize),
    Transpose(usize),
    Sum(usize),
    Diag(usize),
    OffDiagRowSums(usize),
    // The input id is kept for tape introspection even though backward never
    // follows it.
    #[allow(dead_code)]
    StopGradient(usize),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, if any path reached it.
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, var: Var) -> Matrix<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Matrix::zeros(var.rows, var.cols),
        }
    }
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, requires_grad });
        Var { id, rows, cols, requires_grad }
    }

    /// Register an input matrix. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Register a constant (never receives gradients).
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    /// Forward value of a variable.
    pub fn value(&self, var: Var) -> &Matrix<T> {
        &self.nodes[var.id].value
    }

    /// Scalar value of a 1x1 variable.
    pub fn scalar_value(&self, var: Var) -> Result<T> {
        if var.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "expected a 1x1 value, got {}x{}",
                var.rows, var.cols
            )));
        }
        Ok(self.value(var)[(0, 0)])
    }

    /// Matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.push(Op::MatMul(a.id, b.id), value, rg))
    }

    /// Elementwise sum with row-vector, column-vector, and 1x1 broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_add(self.value(a), self.value(b))?;
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.push(Op::Add(a.id, b.id), value, rg))
    }

    /// Multiply every entry by the constant `k`.
    pub fn scalar_mul(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).scale(k);
        self.push(Op::ScalarMul(a.id, k), value, a.requires_grad)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a.id), value, a.requires_grad)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a.id), value, a.requires_grad)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a.id), value, a.requires_grad)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN must propagate (IEEE max would swallow it), so the loss layer's
        // non-finiteness check can actually see poisoned values.
        let value = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        self.push(Op::Relu(a.id), value, a.requires_grad)
    }

    /// Normalize each row to unit L2 norm, guarded by an epsilon inside the
    /// square root so all-zero rows map to zeros instead of NaN.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let n = row_norm_eps(x.row(i));
            for j in 0..x.cols() {
                out[(i, j)] = x[(i, j)] / n;
            }
        }
        self.push(Op::RowNormalize(a.id), out, a.requires_grad)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a.id), value, a.requires_grad)
    }

    /// Sum of all entries, as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.value(a).as_slice() {
            s += x;
        }
        let value = Matrix::from_vec(1, 1, vec![s]).expect("1x1");
        self.push(Op::Sum(a.id), value, a.requires_grad)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        if a.rows != a.cols {
            return Err(Error::shape(format!("diag of {}x{}", a.rows, a.cols)));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(a.rows, 1);
        for i in 0..a.rows {
            out[(i, 0)] = x[(i, i)];
        }
        Ok(self.push(Op::Diag(a.id), out, a.requires_grad))
    }

    /// Row sums excluding the diagonal entry, as a column vector.
    pub fn offdiag_row_sums(&mut self, a: Var) -> Result<Var> {
        if a.rows != a.cols {
            return Err(Error::shape(format!("offdiag_row_sums of {}x{}", a.rows, a.cols)));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(a.rows, 1);
        for i in 0..a.rows {
            let mut s = T::zero();
            for j in 0..a.cols {
                if j != i {
                    s += x[(i, j)];
                }
            }
            out[(i, 0)] = s;
        }
        Ok(self.push(Op::OffDiagRowSums(a.id), out, a.requires_grad))
    }

    /// Identity forward; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::StopGradient(a.id), value, false)
    }

    /// Reverse sweep from `out`, seeded with ones. Each node is visited
    /// exactly once in reverse recording order.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        if !out.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.id] = Some(Matrix::filled(out.rows, out.cols, T::one()));

        for id in (0..=out.id).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match self.nodes[id].op {
                Op::Leaf | Op::StopGradient(_) => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a].requires_grad {
                        let da = g.matmul(&self.nodes[b].value.transpose())?;
                        accumulate(&mut grads, a, da)?;
                    }
                    if self.nodes[b].requires_grad {
                        let db = self.nodes[a].value.transpose().matmul(&g)?;
                        accumulate(&mut grads, b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a].requires_grad {
                        let da = reduce_to_shape(&g, self.nodes[a].value.shape());
                        accumulate(&mut grads, a, da)?;
                    }
                    if self.nodes[b].requires_grad {
                        let db = reduce_to_shape(&g, self.nodes[b].value.shape());
                        accumulate(&mut grads, b, db)?;
                    }
                }
                Op::ScalarMul(a, k) => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, g.scale(k))?;
                    }
                }
                Op::Exp(a) => {
                    if self.nodes[a].requires_grad {
                        let da = g.zip_map(&self.nodes[id].value, |gi, yi| gi * yi)?;
                        accumulate(&mut grads, a, da)?;
                    }
                }
                Op::Log(a) => {
                    if self.nodes[a].requires_grad {
                        let da = g.zip_map(&self.nodes[a].value, |gi, xi| gi / xi)?;
                        accumulate(&mut grads, a, da)?;
                    }
                }
                Op::Tanh(a) => {
                    if self.nodes[a].requires_grad {
                        let da = g.zip_map(&self.nodes[id].value, |gi, yi| gi * (T::one() - yi * yi))?;
                        accumulate(&mut grads, a, da)?;
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[a].requires_grad {
                        let da = g.zip_map(&self.nodes[a].value, |gi, xi| {
                            if xi > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        })?;
                        accumulate(&mut grads, a, da)?;
                    }
                }
                Op::RowNormalize(a) => {
                    if self.nodes[a].requires_grad {
                        let x = &self.nodes[a].value;
                        let mut da = Matrix::zeros(x.rows(), x.cols());
                        for i in 0..x.rows() {
                            let n = row_norm_eps(x.row(i));
                            let n3 = n * n * n;
                            let mut xg = T::zero();
                            for j in 0..x.cols() {
                                xg += x[(i, j)] * g[(i, j)];
                            }
                            for j in 0..x.cols() {
                                da[(i, j)] = g[(i, j)] / n - x[(i, j)] * xg / n3;
                            }
                        }
                        accumulate(&mut grads, a, da)?;
                    }
                }
                Op::Transpose(a) => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut grads, a, g.transpose())?;
                    }
                }
                Op::Sum(a) => {
                    if self.nodes[a].requires_grad {
                        let (r, c) = self.nodes[a].value.shape();
                        accumulate(&mut grads, a, Matrix::filled(r, c, g[(0, 0)]))?;
                    }
                }
                Op::Diag(a) => {
                    if self.nodes[a].requires_grad {
                        let n = self.nodes[a].value.rows();
                        let mut da = Matrix::zeros(n, n);
                        for i in 0..n {
                            da[(i, i)] = g[(i, 0)];
                        }
                        accumulate(&mut grads, a, da)?;
                    }
                }
                Op::OffDiagRowSums(a) => {
                    if self.nodes[a].requires_grad {
                        let n = self.nodes[a].value.rows();
                        let mut da = Matrix::zeros(n, n);
                        for i in 0..n {
                            for j in 0..n {
                                if j != i {
                                    da[(i, j)] = g[(i, 0)];
                                }
                            }
                        }
                        accumulate(&mut grads, a, da)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: usize, delta: Matrix<T>) -> Result<()> {
    match &mut grads[id] {
        Some(g) => {
            *g = g.add(&delta)?;
        }
        slot => *slot = Some(delta),
    }
    Ok(())
}

/// Row norm with the epsilon guard inside the square root.
fn row_norm_eps<T: Scalar>(row: &[T]) -> T {
    let mut s = T::zero();
    for &x in row {
        s += x * x;
    }
    (s + T::of(ROW_NORM_EPS)).sqrt()
}

/// Forward value of broadcasting addition. Supported pairings: equal shapes,
/// one operand 1x1, a row vector against a matrix with the same column count,
/// or a column vector against a matrix with the same row count.
fn broadcast_add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() == b.shape() {
        return a.add(b);
    }
    // Scalar against anything.
    if b.shape() == (1, 1) {
        let k = b[(0, 0)];
        return Ok(a.map(|x| x + k));
    }
    if a.shape() == (1, 1) {
        let k = a[(0, 0)];
        return Ok(b.map(|x| k + x));
    }
    // Row vector against matrix.
    if b.rows() == 1 && b.cols() == a.cols() {
        let mut out = a.clone();
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                out[(i, j)] += b[(0, j)];
            }
        }
        return Ok(out);
    }
    if a.rows() == 1 && a.cols() == b.cols() {
        let mut out = b.clone();
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out[(i, j)] = a[(0, j)] + out[(i, j)];
            }
        }
        return Ok(out);
    }
    // Column vector against matrix.
    if b.cols() == 1 && b.rows() == a.rows() {
        let mut out = a.clone();
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                out[(i, j)] += b[(i, 0)];
            }
        }
        return Ok(out);
    }
    if a.cols() == 1 && a.rows() == b.rows() {
        let mut out = b.clone();
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out[(i, j)] = a[(i, 0)] + out[(i, j)];
            }
        }
        return Ok(out);
    }
    Err(Error::shape(format!(
        "add of {}x{} with {}x{} (broadcast supports equal shapes, 1x1, row and column vectors)",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    )))
}

/// Sum `g` down to `shape` (inverse of broadcasting in `broadcast_add`).
fn reduce_to_shape<T: Scalar>(g: &Matrix<T>, shape: (usize, usize)) -> Matrix<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = shape;
    let mut out = Matrix::zeros(r, c);
    if (r, c) == (1, 1) {
        let mut s = T::zero();
        for &x in g.as_slice() {
            s += x;
        }
        out[(0, 0)] = s;
    } else if r == 1 {
        for j in 0..c {
            let mut s = T::zero();
            for i in 0..g.rows() {
                s += g[(i, j)];
            }
            out[(0, j)] = s;
        }
    } else {
        for i in 0..r {
            let mut s = T::zero();
            for j in 0..g.cols() {
                s += g[(i, j)];
            }
            out[(i, 0)] = s;
        }
    }
    out
}

/// Compare recorded gradients against central finite differences.
///
/// `f` must build a scalar (1x1) output from the leaves it is handed; it is
/// re-run on perturbed copies of `params`, so it has to be a pure function of
/// the tape and those leaves. Returns the worst relative error
/// `|g_ad - g_fd| / (|g_fd| + 1e-8)` over all coordinates. Paths cut by
/// `stop_gradient` are invisible to the recorded gradient but not to the
/// finite differences, so a mismatch on such paths is reported, not hidden.
pub fn grad_check<T, F>(f: F, params: &[Matrix<T>], h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(h > T::zero()) || h > T::of(1e-2) {
        return Err(Error::contract(format!(
            "step size must lie in (0, 1e-2], got {}",
            h
        )));
    }

    let eval = |ps: &[Matrix<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar_value(out)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if out.shape() != (1, 1) {
        return Err(Error::contract(format!(
            "grad_check needs a scalar objective, got {}x{}",
            out.shape().0,
            out.shape().1
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix<T>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut worst = T::zero();
    let mut work: Vec<Matrix<T>> = params.to_vec();
    for (p, param) in params.iter().enumerate() {
        for idx in 0..param.as_slice().len() {
            let orig = param.as_slice()[idx];
            work[p].as_mut_slice()[idx] = orig + h;
            let up = eval(&work)?;
            work[p].as_mut_slice()[idx] = orig - h;
            let down = eval(&work)?;
            work[p].as_mut_slice()[idx] = orig;
            let fd = (up - down) / (T::of(2.0) * h);
            let ad = analytic[p].as_slice()[idx];
            let rel = (ad - fd).abs() / (fd.abs() + T::of(GRAD_CHECK_GUARD));
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
