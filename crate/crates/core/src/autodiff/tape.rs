//! Reverse-mode tape over dense matrices.
//!
//! Every op appends a node; node indices are therefore a topological
//! order and backward is a single reverse sweep. Forward results are
//! checked for finiteness so exploding losses fail loudly.

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `n×m + 1×m`
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n×m ⊙ n×1`, the column broadcast across columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    /// Column means, `n×m → 1×m`.
    MeanRows(Var),
    /// Row sums, `n×m → n×1`.
    SumCols(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    /// One column per row, `n×m → n×1`.
    Pick(Var, Vec<usize>),
    Covariance(Var),
    PairwiseSqDist(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::PairwiseSqDist(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::ClampMin(a, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::SumCols(a)
            | Op::LogSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _)
            | Op::Covariance(a) => vec![*a],
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// Elementwise sum of equal shapes, or row broadcast when `b` is `1×m`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
            return self.push(value, Op::Add(a, b), "add");
        }
        if sb.0 == 1 && sb.1 == sa.1 {
            let mut value = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for r in 0..sa.0 {
                for (x, bb) in value.row_mut(r).iter_mut().zip(&bias) {
                    *x += bb;
                }
            }
            return self.push(value, Op::AddRow(a, b), "add");
        }
        Err(Error::Shape {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), "sub")
    }

    /// Elementwise product; `b` may be an `n×1` column broadcast across columns.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
            return self.push(value, Op::Mul(a, b), "mul");
        }
        if sb.1 == 1 && sb.0 == sa.0 {
            let mut value = self.value(a).clone();
            for r in 0..sa.0 {
                let s = self.value(b).data()[r];
                for x in value.row_mut(r) {
                    *x *= s;
                }
            }
            return self.push(value, Op::MulCol(a, b), "mul");
        }
        Err(Error::Shape {
            op: "mul",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a), "add_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a), "log")
    }

    /// `x^p` for nonnegative inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::Powf(a, p), "powf")
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor), "clamp_min")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), "square")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a), "sqrt")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let n = m.rows() * m.cols();
        if n == 0 {
            return Err(Error::Autodiff("mean of an empty tensor".into()));
        }
        let value = Matrix::scalar(m.sum() / n as f64);
        self.push(value, Op::Mean(a), "mean")
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let (n, c) = m.shape();
        if n == 0 {
            return Err(Error::Autodiff("mean_rows of an empty tensor".into()));
        }
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let value = Matrix::row_vector(&out);
        self.push(value, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let value = Matrix::column(&sums);
        self.push(value, Op::SumCols(a), "sum_cols")
    }

    /// Row-wise log-softmax with max shift.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        self.push(value, Op::LogSoftmax(a), "log_softmax")
    }

    /// Row subset (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.shape(a).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Autodiff(format!("gather_rows index {bad} >= {rows}")));
        }
        let value = self.value(a).select_rows(indices);
        self.push(value, Op::GatherRows(a, indices.to_vec()), "gather_rows")
    }

    /// Element `(i, cols[i])` of every row.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(a);
        if cols.len() != n || cols.iter().any(|&c| c >= m) {
            return Err(Error::Autodiff(format!(
                "pick: {} column indices for a {n}×{m} tensor",
                cols.len()
            )));
        }
        let v = self.value(a);
        let picked: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| v.get(i, c)).collect();
        let value = Matrix::column(&picked);
        self.push(value, Op::Pick(a, cols.to_vec()), "pick")
    }

    /// `(1/n) Xcᵀ Xc` with `Xc` the column-centered input.
    pub fn covariance(&mut self, a: Var) -> Result<Var> {
        let centered = centered(self.value(a))?;
        let n = centered.rows() as f64;
        let value = centered.t_matmul(&centered)?.map(|v| v / n);
        self.push(value, Op::Covariance(a), "covariance")
    }

    /// `D[i][j] = ‖x_i − y_j‖²`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xm, ym) = (self.value(x), self.value(y));
        if xm.cols() != ym.cols() {
            return Err(Error::Shape {
                op: "pairwise_sq_dist",
                lhs: xm.shape(),
                rhs: ym.shape(),
            });
        }
        let mut value = Matrix::zeros(xm.rows(), ym.rows());
        for i in 0..xm.rows() {
            for j in 0..ym.rows() {
                let d: f64 = xm
                    .row(i)
                    .iter()
                    .zip(ym.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                value.set(i, j, d);
            }
        }
        self.push(value, Op::PairwiseSqDist(x, y), "pairwise_sq_dist")
    }

    /// Cross-entropy per example, `n×1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let logp = self.log_softmax(logits)?;
        let picked = self.pick(logp, labels)?;
        self.neg(picked)
    }

    /// Propagates from a `1×1` loss. Only one backward per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice on the same tape; call reset_grads first".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad)?;
            self.grads[idx] = Some(grad);
        }
        self.backward_done = true;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let ga = g.matmul_t(self.value(b))?;
                    self.accumulate(a, ga);
                }
                if self.requires_grad(b) {
                    let gb = self.value(a).t_matmul(g)?;
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(a, g.clone());
                let mut gb = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (o, x) in gb.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(b, Matrix::row_vector(&gb));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(b), |x, y| x * y);
                let gb = g.zip_map(self.value(a), |x, y| x * y);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let mut ga = g.clone();
                let mut gb = vec![0.0; g.rows()];
                for r in 0..g.rows() {
                    let s = bv.data()[r];
                    gb[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                self.accumulate(a, ga);
                self.accumulate(b, Matrix::column(&gb));
            }
            Op::Scale(a, f) => self.accumulate(a, g.map(|x| x * f)),
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(&self.nodes[idx].value, |x, y| x * y);
                self.accumulate(a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(a), |x, v| x / v);
                self.accumulate(a, ga);
            }
            Op::Powf(a, p) => {
                let ga = g.zip_map(self.value(a), |x, v| x * p * v.powf(p - 1.0));
                self.accumulate(a, ga);
            }
            Op::ClampMin(a, floor) => {
                let ga = g.zip_map(self.value(a), |x, v| if v > floor { x } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(a), |x, v| 2.0 * x * v);
                self.accumulate(a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(&self.nodes[idx].value, |x, s| 0.5 * x / s);
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Matrix::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *o = x / r as f64;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let s = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|o| *o = s);
                }
                self.accumulate(a, ga);
            }
            Op::LogSoftmax(a) => {
                // d/dz: g − softmax · Σ g
                let out = &self.nodes[idx].value;
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (o, lp) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= lp.exp() * total;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Pick(a, cols) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for (i, &col) in cols.iter().enumerate() {
                    ga.set(i, col, g.data()[i]);
                }
                self.accumulate(a, ga);
            }
            Op::Covariance(a) => {
                let xc = centered(self.value(a))?;
                let n = xc.rows() as f64;
                let sym = g.zip_map(&g.transpose(), |x, y| x + y);
                let ga = xc.matmul(&sym)?.map(|v| v / n);
                self.accumulate(a, ga);
            }
            Op::PairwiseSqDist(x, y) => {
                let (xm, ym) = (self.value(x).clone(), self.value(y).clone());
                let d = xm.cols();
                let mut gx = Matrix::zeros(xm.rows(), d);
                let mut gy = Matrix::zeros(ym.rows(), d);
                for i in 0..xm.rows() {
                    for j in 0..ym.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = 2.0 * gij * (xm.get(i, k) - ym.get(j, k));
                            gx.data_mut()[i * d + k] += diff;
                            gy.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(y, gy);
            }
        }
        Ok(())
    }
}

fn centered(m: &Matrix) -> Result<Matrix> {
    let (n, c) = m.shape();
    if n == 0 {
        return Err(Error::Autodiff("covariance of an empty tensor".into()));
    }
    let mut means = vec![0.0; c];
    for r in 0..n {
        for (o, x) in means.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    means.iter_mut().for_each(|v| *v /= n as f64);
    let mut out = m.clone();
    for r in 0..n {
        for (x, mu) in out.row_mut(r).iter_mut().zip(&means) {
            *x -= mu;
        }
    }
    Ok(out)
}
