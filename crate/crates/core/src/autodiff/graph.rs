//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape: every primitive pushes one node whose
//! parents already exist, so reverse insertion order is a valid topological
//! order for [`Graph::backward`]. Nodes created from constants never receive
//! gradients and no backward work is done for subgraphs that only depend on
//! constants.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, log_sum_exp, Matrix, Real};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the built-in primitive set.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one gradient per input (`None` = zero).
    fn backward(&self, inputs: &[&Matrix<T>], output: &Matrix<T>, grad_output: &Matrix<T>) -> Vec<Option<Matrix<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedFill(Var, Rc<[bool]>),
    LogSumExpRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// The operation tape. Confined to one thread; rebuilt per batch.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = Matrix::zeros(sa.0, sb.1);
        gemm_into(self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = Matrix::zeros(sa.0, sb.0);
        gemm_into(self.value(a), false, self.value(b), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Matrix::from_vec(sa.0, sa.1, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + row` with `row` (1 x cols) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// `log(sigmoid(a))` without overflow for large `|a|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::LogSigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    // ---- row-wise normalizers ------------------------------------------

    /// Row softmax; a row that is entirely `-inf` maps to all zeros.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row log-softmax; a row that is entirely `-inf` stays `-inf`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Replace entries where `mask` is true by `fill` (typically `-inf`).
    pub fn masked_fill(&mut self, a: Var, mask: Rc<[bool]>, fill: T) -> Result<Var> {
        let s = self.shape(a);
        if mask.len() != s.0 * s.1 {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: s,
                rhs: (mask.len(), 1),
            });
        }
        let mut out = self.value(a).clone();
        for (x, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
            if m {
                *x = fill;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedFill(a, mask), rg))
    }

    /// Per-row logsumexp as a `rows x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| log_sum_exp(v.row(r))).collect();
        let out = Matrix::from_vec(v.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::LogSumExpRows(a), rg)
    }

    /// Layer normalization over each row, with `gamma`/`beta` of shape 1 x cols.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sg != (1, sx.1) || sb != sg {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: sg,
            });
        }
        let xv = self.value(x);
        let c = T::of(sx.1 as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(sx.0, sx.1);
        let mut inv_std = Vec::with_capacity(sx.0);
        for r in 0..sx.0 {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for r in 0..sx.0 {
            for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Matrix::from_vec(rows, cols, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(p),
                });
            }
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.0 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: s,
                rhs: (start + len, s.1),
            });
        }
        let v = self.value(a);
        let data = v.data()[start * s.1..(start + len) * s.1].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Matrix::from_vec(len, s.1, data), Op::SliceRows(a, start), rg))
    }

    /// Rows picked by index, in the given order (repeats allowed).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.0) {
            return Err(Error::ShapeMismatch {
                op: "select_rows",
                lhs: s,
                rhs: (bad, s.1),
            });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * s.1);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Matrix::from_vec(idx.len(), s.1, data),
            Op::SelectRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Individual entries `(row, col)` collected into a `1 x k` row.
    pub fn gather(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(a);
        if let Some(&(r, c)) = at.iter().find(|&&(r, c)| r >= s.0 || c >= s.1) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: s,
                rhs: (r, c),
            });
        }
        let v = self.value(a);
        let data = at.iter().map(|&(r, c)| v.get(r, c)).collect();
        let rg = self.rg(a);
        Ok(self.push(Matrix::from_vec(1, at.len(), data), Op::Gather(a, at.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::scalar(v.sum() / T::of(v.len() as f64));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Record an externally computed value with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Seed `d loss / d loss = 1` and propagate to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, d) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Matrix<T>) -> Vec<(Var, Matrix<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let mut da = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm_into(g, false, val(*b), true, &mut da, false);
                    res.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm_into(val(*a), true, g, false, &mut db, false);
                    res.push((*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    let mut da = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    gemm_into(g, false, val(*b), false, &mut da, false);
                    res.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    gemm_into(g, true, val(*a), false, &mut db, false);
                    res.push((*b, db));
                }
            }
            Op::Transpose(a) => res.push((*a, g.transpose())),
            Op::Add(a, b) => {
                if self.rg(*a) {
                    res.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    res.push((*b, g.clone()));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    res.push((*a, g.clone()));
                }
                if self.rg(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        dr.add_row_from(g.row(r));
                    }
                    res.push((*row, dr));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    res.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    res.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    res.push((*a, zip_map(g, val(*b), |gi, bi| gi * bi)));
                }
                if self.rg(*b) {
                    res.push((*b, zip_map(g, val(*a), |gi, ai| gi * ai)));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    res.push((*a, zip_map(g, val(*b), |gi, bi| gi / bi)));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = zip_map(g, out, |gi, oi| -gi * oi);
                    res.push((*b, zip_map(&t, val(*b), |ti, bi| ti / bi)));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.map(|x| x * *s))),
            Op::Neg(a) => res.push((*a, g.map(|x| -x))),
            Op::Exp(a) => res.push((*a, zip_map(g, out, |gi, oi| gi * oi))),
            Op::Ln(a) => res.push((*a, zip_map(g, val(*a), |gi, ai| gi / ai))),
            Op::Sigmoid(a) => {
                res.push((*a, zip_map(g, out, |gi, s| gi * s * (T::one() - s))));
            }
            Op::LogSigmoid(a) => {
                // d/dx log sigmoid(x) = sigmoid(-x)
                res.push((*a, zip_map(g, val(*a), |gi, x| gi * sigmoid(-x))));
            }
            Op::Relu(a) => {
                res.push((
                    *a,
                    zip_map(g, val(*a), |gi, x| if x > T::zero() { gi } else { T::zero() }),
                ));
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for ((o, &yi), &gi) in d.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = yi * (gi - dot);
                    }
                }
                res.push((*a, d));
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    if y.iter().all(|&v| v == T::neg_infinity()) {
                        continue;
                    }
                    let gsum: T = gy.iter().copied().sum();
                    for ((o, &yi), &gi) in d.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = gi - yi.exp() * gsum;
                    }
                }
                res.push((*a, d));
            }
            Op::MaskedFill(a, mask) => {
                let mut d = g.clone();
                for (x, &m) in d.data_mut().iter_mut().zip(mask.iter()) {
                    if m {
                        *x = T::zero();
                    }
                }
                res.push((*a, d));
            }
            Op::LogSumExpRows(a) => {
                let av = val(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let lse = out.get(r, 0);
                    if lse == T::neg_infinity() {
                        continue;
                    }
                    let gr = g.get(r, 0);
                    for (o, &x) in d.row_mut(r).iter_mut().zip(av.row(r)) {
                        *o = gr * (x - lse).exp();
                    }
                }
                res.push((*a, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                let (rows, cols) = xhat.shape();
                if self.rg(*beta) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        db.add_row_from(g.row(r));
                    }
                    res.push((*beta, db));
                }
                if self.rg(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, &gi), &xh) in dg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o = *o + gi * xh;
                        }
                    }
                    res.push((*gamma, dg));
                }
                if self.rg(*x) {
                    let c = T::of(cols as f64);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxh: Vec<T> = g.row(r).iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                        let is = inv_std[r];
                        for ((o, &dh), &xh) in dx.row_mut(r).iter_mut().zip(&dxh).zip(xhat.row(r)) {
                            *o = is / c * (c * dh - s1 - xh * s2);
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        res.push((p, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let h = val(p).rows();
                    if self.rg(p) {
                        let d = g.data()[offset * cols..(offset + h) * cols].to_vec();
                        res.push((p, Matrix::from_vec(h, cols, d)));
                    }
                    offset += h;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                let c = av.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                res.push((*a, d));
            }
            Op::SelectRows(a, idx) => {
                let av = val(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &gi) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o = *o + gi;
                    }
                }
                res.push((*a, d));
            }
            Op::Gather(a, at) => {
                let av = val(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for (k, &(r, c)) in at.iter().enumerate() {
                    d.set(r, c, d.get(r, c) + g.get(0, k));
                }
                res.push((*a, d));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                res.push((*a, Matrix::filled(r, c, g.scalar_value())));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let n = T::of((r * c) as f64);
                res.push((*a, Matrix::filled(r, c, g.scalar_value() / n)));
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Matrix<T>> = inputs.iter().map(|&v| val(v)).collect();
                for (&v, d) in inputs.iter().zip(op.backward(&ins, out, g)) {
                    if let Some(d) = d {
                        res.push((v, d));
                    }
                }
            }
        }
        res
    }
}

impl<T: Real> Matrix<T> {
    fn add_row_from(&mut self, row: &[T]) {
        for (o, &x) in self.row_mut(0).iter_mut().zip(row) {
            *o = *o + x;
        }
    }
}

fn zip_map<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sigmoid<T: Real>(x: T) -> T {
    // -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row softmax with max subtraction; fully `-inf` rows become zeros.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let o = out.row_mut(r);
        let mut z = T::zero();
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = (x - max).exp();
            z = z + *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / z;
        }
    }
    out
}

/// Row log-softmax; fully `-inf` rows stay `-inf`.
pub fn log_softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::filled(m.rows(), m.cols(), T::neg_infinity());
    for r in 0..m.rows() {
        let lse = log_sum_exp(m.row(r));
        if lse == T::neg_infinity() {
            continue;
        }
        for (o, &x) in out.row_mut(r).iter_mut().zip(m.row(r)) {
            *o = x - lse;
        }
    }
    out
}
