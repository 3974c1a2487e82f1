//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is already a topological order of the computation graph. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every node that requires them.
//!
//! ```
//! use smoothgnn::autodiff::Tape;
//! use smoothgnn::linalg::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().as_slice(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, Matrix};

/// Lower clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Scale(Tensor, f64),
    Mul(Tensor, Tensor),
    RowSoftmax(Tensor),
    LogClamped(Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    ConcatCols(Tensor, Tensor),
    SliceRows(Tensor, usize),
    GatherRows(Tensor, Arc<[usize]>),
    Sum(Tensor),
    Dropout(Tensor, Matrix),
    Spmm(Arc<CsrMatrix>, Tensor),
    EdgeScores(Tensor, Tensor, Arc<CsrMatrix>),
    EdgeSoftmax(Tensor, Arc<CsrMatrix>),
    EdgeAggregate(Tensor, Tensor, Arc<CsrMatrix>),
}

struct Node {
    value: Matrix,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Tensor {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.grads[t.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Tensor {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Matrix, inputs: &[Tensor], op: Op) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let requires_grad = inputs.iter().any(|t| self.nodes[t.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let v = self.value(a).matmul(self.value(b))?;
        self.record("matmul", v, &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record("add", v, &[a, b], Op::Add(a, b))
    }

    /// Adds a `1 × d` row vector to every row of an `n × d` matrix.
    pub fn add_row(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (n, d) = self.shape(a);
        if self.shape(bias) != (1, d) {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for input {:?}", self.shape(bias), (n, d)),
            ));
        }
        let b = self.value(bias).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..n {
            v.row_mut(i).iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        self.record("add_row", v, &[a, bias], Op::AddRow(a, bias))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Tensor, alpha: f64) -> Result<Tensor> {
        let v = self.value(a).map(|x| alpha * x);
        self.record("scale", v, &[a], Op::Scale(a, alpha))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("elementwise_mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record("elementwise_mul", v, &[a, b], Op::Mul(a, b))
    }

    pub fn row_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.record("row_softmax", v, &[a], Op::RowSoftmax(a))
    }

    /// `log(max(x, 1e-12))`
    pub fn log_clamped(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a).map(|x| x.max(LOG_EPS).ln());
        self.record("log_clamped", v, &[a], Op::LogClamped(a))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.record("relu", v, &[a], Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Result<Tensor> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.record("leaky_relu", v, &[a], Op::LeakyRelu(a, slope))
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let v = Matrix::from_fn(ra, ca + cb, |i, j| {
            if j < ca {
                va[(i, j)]
            } else {
                vb[(i, j - ca)]
            }
        });
        self.record("concat_cols", v, &[a, b], Op::ConcatCols(a, b))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of a {r}-row tensor", start + len),
            ));
        }
        let src = self.value(a);
        let v = Matrix::from_vec(len, c, src.as_slice()[start * c..(start + len) * c].to_vec())?;
        self.record("slice_rows", v, &[a], Op::SliceRows(a, start))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Tensor, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::input(format!("row index {bad} out of range for {r} rows")));
        }
        let src = self.value(a);
        let v = Matrix::from_fn(rows.len(), c, |i, j| src[(rows[i], j)]);
        self.record("gather_rows", v, &[a], Op::GatherRows(a, rows.into()))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.record("sum", v, &[a], Op::Sum(a))
    }

    /// Inverted dropout. With `training == false` or `rate == 0` the input
    /// tensor itself is returned.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Tensor,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::input(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_fn(r, c, |_, _| if rng.gen::<f64>() < rate { 0.0 } else { keep });
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.record("dropout", v, &[a], Op::Dropout(a, mask))
    }

    /// Sparse-dense product `S · B`. `S` is a constant.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, b: Tensor) -> Result<Tensor> {
        let v = s.matmul_dense(self.value(b))?;
        self.record("spmm", v, &[b], Op::Spmm(Arc::clone(s), b))
    }

    /// Per-edge scores `src[row(k)] + dst[col(k)]` for every stored entry
    /// `k` of `pattern`, returned as an `nnz × 1` column.
    pub fn edge_scores(&mut self, src: Tensor, dst: Tensor, pattern: &Arc<CsrMatrix>) -> Result<Tensor> {
        let n = pattern.n_rows();
        if self.shape(src) != (n, 1) || self.shape(dst) != (n, 1) {
            return Err(Error::shape(
                "edge_scores",
                format!("{:?}, {:?} for {n} nodes", self.shape(src), self.shape(dst)),
            ));
        }
        let (s, d) = (self.value(src).as_slice(), self.value(dst).as_slice());
        let mut out = Vec::with_capacity(pattern.nnz());
        for i in 0..n {
            for &j in pattern.row(i).0 {
                out.push(s[i] + d[j]);
            }
        }
        let v = Matrix::from_vec(pattern.nnz(), 1, out)?;
        self.record("edge_scores", v, &[src, dst], Op::EdgeScores(src, dst, Arc::clone(pattern)))
    }

    /// Softmax of an `nnz × 1` edge column within each row of `pattern`.
    pub fn edge_softmax(&mut self, scores: Tensor, pattern: &Arc<CsrMatrix>) -> Result<Tensor> {
        if self.shape(scores) != (pattern.nnz(), 1) {
            return Err(Error::shape("edge_softmax", "scores must be nnz x 1"));
        }
        let mut v = self.value(scores).clone();
        let ptr = pattern.indptr();
        for i in 0..pattern.n_rows() {
            softmax_in_place(&mut v.as_mut_slice()[ptr[i]..ptr[i + 1]]);
        }
        self.record("edge_softmax", v, &[scores], Op::EdgeSoftmax(scores, Arc::clone(pattern)))
    }

    /// `out[i] = Σ_k weights[k] · h[col(k)]` over the entries `k` of row `i`.
    pub fn edge_aggregate(&mut self, weights: Tensor, h: Tensor, pattern: &Arc<CsrMatrix>) -> Result<Tensor> {
        if self.shape(weights) != (pattern.nnz(), 1) || self.rows_of(h) != pattern.n_cols() {
            return Err(Error::shape(
                "edge_aggregate",
                format!("weights {:?}, features {:?}", self.shape(weights), self.shape(h)),
            ));
        }
        let w = pattern.with_values(self.value(weights).as_slice().to_vec())?;
        let v = w.matmul_dense(self.value(h))?;
        self.record(
            "edge_aggregate",
            v,
            &[weights, h],
            Op::EdgeAggregate(weights, h, Arc::clone(pattern)),
        )
    }

    fn rows_of(&self, t: Tensor) -> usize {
        self.shape(t).0
    }

    /// Back-propagates from a `1 × 1` tensor, accumulating into every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::input(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric { op: "backward" });
            }
            self.propagate(id, &g, &mut pending)?;
            match &mut self.grads[id] {
                Some(acc) => acc.axpy(1.0, &g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, pending: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |t: Tensor, grad: Matrix| {
            if !self.nodes[t.0].requires_grad {
                return;
            }
            match &mut pending[t.0] {
                Some(acc) => acc.axpy(1.0, &grad),
                slot => *slot = Some(grad),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    send(*a, g.matmul_nt(self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    send(*b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    gb.row_mut(0).iter_mut().zip(g.row(i)).for_each(|(s, x)| *s += x);
                }
                send(*bias, gb);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Scale(a, alpha) => send(*a, g.map(|x| alpha * x)),
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                send(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::RowSoftmax(a) => {
                let mut ga = g.clone();
                for i in 0..g.rows() {
                    softmax_backward_in_place(ga.row_mut(i), out.row(i));
                }
                send(*a, ga);
            }
            Op::LogClamped(a) => {
                send(
                    *a,
                    g.zip_map(self.value(*a), |gx, x| if x > LOG_EPS { gx / x } else { 0.0 }),
                );
            }
            Op::Relu(a) => send(*a, g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            Op::LeakyRelu(a, slope) => send(
                *a,
                g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { slope * gx }),
            ),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                send(*a, Matrix::from_fn(g.rows(), ca, |i, j| g[(i, j)]));
                send(*b, Matrix::from_fn(g.rows(), cb, |i, j| g[(i, ca + j)]));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                send(*a, ga);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in rows.iter().enumerate() {
                    ga.row_mut(i).iter_mut().zip(g.row(k)).for_each(|(s, x)| *s += x);
                }
                send(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::Dropout(a, mask) => send(*a, g.zip_map(mask, |x, m| x * m)),
            Op::Spmm(s, b) => send(*b, s.transpose_matmul_dense(g)?),
            Op::EdgeScores(src, dst, pattern) => {
                let n = pattern.n_rows();
                let mut gs = Matrix::zeros(n, 1);
                let mut gd = Matrix::zeros(n, 1);
                let ge = g.as_slice();
                let mut k = 0;
                for i in 0..n {
                    for &j in pattern.row(i).0 {
                        gs.as_mut_slice()[i] += ge[k];
                        gd.as_mut_slice()[j] += ge[k];
                        k += 1;
                    }
                }
                send(*src, gs);
                send(*dst, gd);
            }
            Op::EdgeSoftmax(scores, pattern) => {
                let mut ga = g.clone();
                let ptr = pattern.indptr();
                for i in 0..pattern.n_rows() {
                    let range = ptr[i]..ptr[i + 1];
                    softmax_backward_in_place(&mut ga.as_mut_slice()[range.clone()], &out.as_slice()[range]);
                }
                send(*scores, ga);
            }
            Op::EdgeAggregate(weights, h, pattern) => {
                let hv = self.value(*h);
                if self.requires_grad(*weights) {
                    let mut gw = Vec::with_capacity(pattern.nnz());
                    for i in 0..pattern.n_rows() {
                        for &j in pattern.row(i).0 {
                            gw.push(crate::linalg::dot(g.row(i), hv.row(j)));
                        }
                    }
                    send(*weights, Matrix::from_vec(pattern.nnz(), 1, gw)?);
                }
                if self.requires_grad(*h) {
                    let w = pattern.with_values(self.value(*weights).as_slice().to_vec())?;
                    send(*h, w.transpose_matmul_dense(g)?);
                }
            }
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Turns an upstream gradient row into the gradient w.r.t. softmax inputs.
fn softmax_backward_in_place(grad: &mut [f64], probs: &[f64]) {
    let inner = crate::linalg::dot(grad, probs);
    for (gx, &p) in grad.iter_mut().zip(probs) {
        *gx = p * (*gx - inner);
    }
}

/// Relative error `‖g − ĝ‖₂ / max(‖g‖₂, ‖ĝ‖₂)` between the analytic gradient
/// `g` of `f` at `x` and its central finite-difference estimate `ĝ`; 0 when
/// both vanish.
///
/// `f` must be deterministic and return a `1 × 1` tensor.
pub fn finite_difference_check<F>(f: F, x: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let xt = tape.param(x.clone());
    let loss = f(&mut tape, xt)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xt)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));

    let eval = |m: Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let t = tape.constant(m);
        let out = f(&mut tape, t)?;
        Ok(tape.value(out)[(0, 0)])
    };
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[k] += step;
        let mut minus = x.clone();
        minus.as_mut_slice()[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.as_slice()[k];
        diff += (a - numeric).powi(2);
        norm_a += a * a;
        norm_n += numeric * numeric;
    }
    let scale = norm_a.max(norm_n).sqrt();
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}
