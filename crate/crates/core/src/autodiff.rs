//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in execution order, so append
//! order is already a topological order. [`Tape::backward`] walks the
//! nodes in reverse, accumulating gradients additively across fan-out.
//!
//! ```
//! use contrastive_age::autodiff::Tape;
//! use contrastive_age::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
//! let loss = tape.dot(x, x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SqNorm(usize),
    Dot(usize, usize),
    Norm(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SelectRows(usize, Vec<usize>),
    Reshape(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of operations.
///
/// Single-writer: build and differentiate on one thread.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; `None` when the loss does not depend on it
    /// or `var` is not tracked.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.as_matrix_dims().ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.as_matrix_dims().expect("checked");
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.as_matrix_dims().expect("checked");
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - max - log_total));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a gradient-tracked input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.check(var)?;
        Ok(&self.nodes[var.index].value)
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        var.tape == self.id && self.nodes[var.index].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignNode(var.index));
        }
        Ok(())
    }

    fn val(&self, var: Var) -> Result<&Tensor> {
        self.value(var)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.nodes[x.index].tracked;
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.nodes[a.index].tracked || self.nodes[b.index].tracked;
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        same_shape("add", va, vb)?;
        let v = zip_map(va, vb, |x, y| x + y);
        Ok(self.binary(a, b, v, Op::Add(a.index, b.index)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        same_shape("sub", va, vb)?;
        let v = zip_map(va, vb, |x, y| x - y);
        Ok(self.binary(a, b, v, Op::Sub(a.index, b.index)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        same_shape("mul", va, vb)?;
        let v = zip_map(va, vb, |x, y| x * y);
        Ok(self.binary(a, b, v, Op::Mul(a.index, b.index)))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        same_shape("div", va, vb)?;
        let v = zip_map(va, vb, |x, y| x / y);
        Ok(self.binary(a, b, v, Op::Div(a.index, b.index)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.val(x)?.map(|v| v * c);
        Ok(self.unary(x, v, Op::Scale(x.index, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.val(x)?.map(|v| v + c);
        Ok(self.unary(x, v, Op::AddScalar(x.index)))
    }

    /// Adds the 1-D `row` (length `n`) to every row of the `m×n` matrix `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.val(x)?, self.val(row)?);
        let (m, n) = matrix_dims("add_row", vx)?;
        if vr.len() != n || vr.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vx.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for i in 0..m {
            for (d, &b) in data[i * n..(i + 1) * n].iter_mut().zip(vr.data()) {
                *d += b;
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.binary(x, row, v, Op::AddRow(x.index, row.index)))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let (m, k) = match va.shape() {
            [m, k] => (*m, *k),
            _ => return Err(mismatch()),
        };
        let n = match vb.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(mismatch()),
        };
        let v = Tensor::matrix(m, n, matmul_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.binary(a, b, v, Op::MatMul(a.index, b.index)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x)?.map(|v| v.max(0.0));
        Ok(self.unary(x, v, Op::Relu(x.index)))
    }

    /// `max(x, 0)`, elementwise. Same rule as [`Tape::relu`].
    pub fn max0(&mut self, x: Var) -> Result<Var> {
        self.relu(x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x)?.map(f64::exp);
        Ok(self.unary(x, v, Op::Exp(x.index)))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x)?.map(f64::ln);
        Ok(self.unary(x, v, Op::Ln(x.index)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x)?.map(f64::sqrt);
        Ok(self.unary(x, v, Op::Sqrt(x.index)))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x)?.map(f64::abs);
        Ok(self.unary(x, v, Op::Abs(x.index)))
    }

    /// `max(x, floor)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let v = self.val(x)?.map(|v| v.max(floor));
        Ok(self.unary(x, v, Op::ClampMin(x.index, floor)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.val(x)?.data().iter().sum());
        Ok(self.unary(x, v, Op::Sum(x.index)))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x)?.len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Squared L2 norm over all entries.
    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.val(x)?.data().iter().map(|v| v * v).sum());
        Ok(self.unary(x, v, Op::SqNorm(x.index)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        same_shape("dot", va, vb)?;
        let v = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum());
        Ok(self.binary(a, b, v, Op::Dot(a.index, b.index)))
    }

    /// L2 norm over all entries.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(
            self.val(x)?
                .data()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt(),
        );
        Ok(self.unary(x, v, Op::Norm(x.index)))
    }

    /// Softmax along the last axis of a 1-D or 2-D tensor, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x)?;
        matrix_dims("softmax", vx)?;
        if let Some(index) = vx.first_non_finite() {
            return Err(Error::NonFinite {
                op: "softmax",
                index,
            });
        }
        let v = softmax_rows(vx);
        Ok(self.unary(x, v, Op::Softmax(x.index)))
    }

    /// Log-softmax along the last axis of a 1-D or 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x)?;
        matrix_dims("log_softmax", vx)?;
        if let Some(index) = vx.first_non_finite() {
            return Err(Error::NonFinite {
                op: "log_softmax",
                index,
            });
        }
        let v = log_softmax_rows(vx);
        Ok(self.unary(x, v, Op::LogSoftmax(x.index)))
    }

    /// Gathers rows of a 2-D tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.val(x)?;
        let (m, n) = match vx.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "select_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if rows.is_empty() {
            return Err(Error::InvalidTensor("select_rows: empty row list".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::InvalidTensor(format!(
                    "select_rows: row {r} out of range for {m} rows"
                )));
            }
            data.extend_from_slice(&vx.data()[r * n..(r + 1) * n]);
        }
        let v = Tensor::matrix(rows.len(), n, data)?;
        Ok(self.unary(x, v, Op::SelectRows(x.index, rows.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(x)?.reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x.index)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let root = &self.nodes[loss.index].value;
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(data) if node.tracked => Some(
                        Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"),
                    ),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let value = |i: usize| self.nodes[i].value.data();
        let tracked = |i: usize| self.nodes[i].tracked;
        let mut accumulate = |i: usize, contribution: Vec<f64>| {
            if !tracked(i) {
                return;
            }
            match &mut grads[i] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(*a, g.to_vec());
                accumulate(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(*a, g.to_vec());
                accumulate(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (value(*a), value(*b));
                accumulate(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                accumulate(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (value(*a), value(*b));
                accumulate(*a, g.iter().zip(vb).map(|(g, y)| g / y).collect());
                accumulate(
                    *b,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::Scale(x, c) => accumulate(*x, g.iter().map(|g| g * c).collect()),
            Op::AddScalar(x) => accumulate(*x, g.to_vec()),
            Op::AddRow(x, row) => {
                accumulate(*x, g.to_vec());
                let n = self.nodes[*row].value.len();
                let mut col_sums = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (s, v) in col_sums.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                accumulate(*row, col_sums);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if tracked(*a) {
                    accumulate(*a, matmul_bt_raw(g, tb.data(), m, n, k));
                }
                if tracked(*b) {
                    accumulate(*b, matmul_at_raw(ta.data(), g, m, k, n));
                }
            }
            Op::Relu(x) => accumulate(
                *x,
                g.iter()
                    .zip(value(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(x) => accumulate(*x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Ln(x) => accumulate(*x, g.iter().zip(value(*x)).map(|(g, v)| g / v).collect()),
            Op::Sqrt(x) => accumulate(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect(),
            ),
            Op::Abs(x) => accumulate(
                *x,
                g.iter()
                    .zip(value(*x))
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::ClampMin(x, floor) => accumulate(
                *x,
                g.iter()
                    .zip(value(*x))
                    .map(|(g, &v)| if v > *floor { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(x) => {
                let n = self.nodes[*x].value.len();
                accumulate(*x, vec![g[0]; n]);
            }
            Op::SqNorm(x) => accumulate(*x, value(*x).iter().map(|v| 2.0 * v * g[0]).collect()),
            Op::Dot(a, b) => {
                let (va, vb) = (value(*a), value(*b));
                accumulate(*a, vb.iter().map(|y| y * g[0]).collect());
                accumulate(*b, va.iter().map(|x| x * g[0]).collect());
            }
            Op::Norm(x) => {
                let norm = out[0];
                let scale = if norm > 0.0 { g[0] / norm } else { 0.0 };
                accumulate(*x, value(*x).iter().map(|v| v * scale).collect());
            }
            Op::Softmax(x) => {
                let (rows, cols) = node.value.as_matrix_dims().expect("checked");
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                    let inner: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dx[span].iter_mut().zip(y).zip(gr) {
                        *d = y * (g - inner);
                    }
                }
                accumulate(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = node.value.as_matrix_dims().expect("checked");
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                    let total: f64 = gr.iter().sum();
                    for ((d, y), g) in dx[span].iter_mut().zip(y).zip(gr) {
                        *d = g - y.exp() * total;
                    }
                }
                accumulate(*x, dx);
            }
            Op::SelectRows(x, rows) => {
                let src = &self.nodes[*x].value;
                let n = src.shape()[1];
                let mut dx = vec![0.0; src.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dx[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[i * n..(i + 1) * n])
                    {
                        *d += v;
                    }
                }
                accumulate(*x, dx);
            }
            Op::Reshape(x) => accumulate(*x, g.to_vec()),
        }
    }
}

/// Result of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_j |analytic_j − fd_j| / max(1, |fd_j|)`.
    pub max_relative_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_coordinate: usize,
}

/// Checks the gradient of the scalar function `f` at `point` against
/// central differences `(f(x+eps·e_j) − f(x−eps·e_j)) / (2·eps)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, point, eps, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradient before
/// comparison. Used to inject faults when testing the checker itself.
pub fn grad_check_with<F, H>(f: F, point: &Tensor, eps: f64, tamper: H) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    H: Fn(&mut [f64]),
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let mut analytic = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);
    tamper(&mut analytic);

    let eval = |p: Tensor, coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let out = f(&mut tape, x)?;
        let v = tape.value(out)?.item().ok_or_else(|| {
            Error::NotScalar(
                tape.value(out)
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_default(),
            )
        })?;
        if !v.is_finite() {
            return Err(Error::GradCheckNonFinite { coordinate });
        }
        Ok(v)
    };

    let mut worst = GradCheck {
        max_relative_error: 0.0,
        worst_coordinate: 0,
    };
    for (j, &g) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[j] += eps;
        let mut minus = point.clone();
        minus.data_mut()[j] -= eps;
        let fd = (eval(plus, j)? - eval(minus, j)?) / (2.0 * eps);
        let err = (g - fd).abs() / fd.abs().max(1.0);
        if err > worst.max_relative_error || err.is_nan() {
            worst = GradCheck {
                max_relative_error: err,
                worst_coordinate: j,
            };
        }
    }
    Ok(worst)
}
