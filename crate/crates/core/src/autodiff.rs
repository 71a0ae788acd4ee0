//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, so parents always
//! precede their children and the backward sweep is a single reverse pass.
//! Graphs are built per batch and dropped afterwards.
//!
//! ```
//! use epsmargin_core::autodiff::Graph;
//! use epsmargin_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
//! let y = g.log_sum_exp(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! let dx = grads.get(x).unwrap();
//! let total: f64 = dx.data().iter().sum();
//! assert!((total - 1.0).abs() < 1e-12); // softmax sums to one
//! ```

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Expand(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMean(Var),
    LogSumExp(Var),
    LogSumExpRows(Var),
    LogSumExpWithExtra(Var, Var),
    L2NormalizeRows(Var),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    PairwiseSqDist(Var),
    RowDiffSqNorm(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Expand(..) => "expand",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::RowMean(..) => "row_mean",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
            Op::LogSumExpWithExtra(..) => "log_sum_exp_with_extra",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::Gather(..) => "gather",
            Op::GatherRows(..) => "gather_rows",
            Op::Concat(..) => "concat",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::RowDiffSqNorm(..) => "row_diff_sq_norm",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::LogSumExpWithExtra(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Expand(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Square(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::RowMean(a)
            | Op::LogSumExp(a)
            | Op::LogSumExpRows(a)
            | Op::L2NormalizeRows(a)
            | Op::Gather(a, _)
            | Op::GatherRows(a, _)
            | Op::PairwiseSqDist(a)
            | Op::RowDiffSqNorm(a, _, _) => vec![*a],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes whose adjoint was propagated during the sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: vec![0, 0],
        }),
    }
}

fn require_vector(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(Error::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: vec![0],
        }),
    }
}

fn require_scalar(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_scalar() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: Vec::new(),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul", self.value(a))?;
        let (k2, n) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?)
    }

    /// `A·Bᵀ` for `A: m×k`, `B: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul_t", self.value(a))?;
        let (n, k2) = require_matrix("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_strided(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            0.0,
        );
        self.push(Op::MatMulT(a, b), Tensor::matrix(m, n, out)?)
    }

    fn zip_map(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("div", a, b, |x, y| x / y)?;
        self.push(Op::Div(a, b), v)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = require_matrix("add_row_broadcast", self.value(x))?;
        let nb = require_vector("add_row_broadcast", self.value(bias))?;
        if n != nb {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: vec![m, n],
                right: vec![nb],
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, bb)| r + bb))
            .collect();
        self.push(Op::AddRowBroadcast(x, bias), Tensor::matrix(m, n, data)?)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    /// Broadcasts a scalar node to `shape`.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        require_scalar("expand", self.value(s))?;
        let v = Tensor::filled(shape, self.scalar(s));
        self.push(Op::Expand(s), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.value(a).data().iter().enumerate().find(|(_, x)| **x <= 0.0) {
            return Err(Error::NonPositiveLog { index, value });
        }
        let v = self.map(a, f64::ln);
        self.push(Op::Log(a), v)
    }

    /// Rectifier; the derivative at exactly zero is taken to be zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * x);
        self.push(Op::Square(a), v)
    }

    /// `max(x, floor)`; entries at or below the floor get zero gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.map(a, |x| x.max(floor));
        self.push(Op::ClampMin(a, floor), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (_, n) = require_matrix("row_sum", self.value(a))?;
        let v = self.value(a).data().chunks(n).map(|r| r.iter().sum()).collect();
        self.push(Op::RowSum(a), Tensor::vector(v))
    }

    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let (_, n) = require_matrix("row_mean", self.value(a))?;
        let v = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        self.push(Op::RowMean(a), Tensor::vector(v))
    }

    /// Stable `log Σ exp(x)` over every entry.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::InvalidArgument("log_sum_exp of empty tensor".into()));
        }
        let v = crate::tensor::log_sum_exp(t.data());
        self.push(Op::LogSumExp(a), Tensor::scalar(v))
    }

    /// Row-wise stable log-sum-exp of an `m×n` matrix.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = require_matrix("log_sum_exp_rows", self.value(a))?;
        if n == 0 {
            return Err(Error::InvalidArgument("log_sum_exp_rows with zero columns".into()));
        }
        let v = self.value(a).data().chunks(n).map(crate::tensor::log_sum_exp).collect();
        self.push(Op::LogSumExpRows(a), Tensor::vector(v))
    }

    /// For each extra term `e_k`, returns `log(exp(e_k) + Σ_j exp(x_j))`.
    ///
    /// The extra term is folded into the same max-shifted sum as `x`.
    /// `x` may be empty, in which case the result equals `extras`.
    pub fn log_sum_exp_with_extra(&mut self, x: Var, extras: Var) -> Result<Var> {
        require_vector("log_sum_exp_with_extra", self.value(x))?;
        require_vector("log_sum_exp_with_extra", self.value(extras))?;
        let xs = self.value(x).data();
        let xmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = self
            .value(extras)
            .data()
            .iter()
            .map(|&e| {
                let m = e.max(xmax);
                let s = (e - m).exp() + xs.iter().map(|xj| (xj - m).exp()).sum::<f64>();
                m + s.ln()
            })
            .collect();
        self.push(Op::LogSumExpWithExtra(x, extras), Tensor::vector(v))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_matrix("l2_normalize_rows", self.value(a))?;
        let mut out = Vec::with_capacity(m * n);
        for (row, r) in self.value(a).data().chunks(n).enumerate() {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow { row });
            }
            out.extend(r.iter().map(|x| x / norm));
        }
        self.push(Op::L2NormalizeRows(a), Tensor::matrix(m, n, out)?)
    }

    /// Picks entries by flat row-major index into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let len = t.len();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= len {
                return Err(Error::IndexOutOfBounds { index: i, len });
            }
            out.push(t.data()[i]);
        }
        self.push(Op::Gather(a, indices.to_vec()), Tensor::vector(out))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = require_matrix("gather_rows", self.value(a))?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::IndexOutOfBounds { index: r, len: m });
            }
            out.extend_from_slice(t.row(r));
        }
        self.push(Op::GatherRows(a, rows.to_vec()), Tensor::matrix(rows.len(), n, out)?)
    }

    /// Flattens and concatenates nodes into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let out: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).data().iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(out))
    }

    /// `D[i][j] = ‖x_i − x_j‖²` for the rows of an `m×n` matrix.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let (m, n) = require_matrix("pairwise_sq_dist", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let d: f64 = x[i * n..(i + 1) * n]
                    .iter()
                    .zip(&x[j * n..(j + 1) * n])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                out[i * m + j] = d;
                out[j * m + i] = d;
            }
        }
        self.push(Op::PairwiseSqDist(a), Tensor::matrix(m, m, out)?)
    }

    /// `‖x_i − x_j‖²` for two rows of a matrix.
    pub fn row_diff_sq_norm(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let (m, _) = require_matrix("row_diff_sq_norm", self.value(a))?;
        for r in [i, j] {
            if r >= m {
                return Err(Error::IndexOutOfBounds { index: r, len: m });
            }
        }
        let t = self.value(a);
        let d = t.row(i).iter().zip(t.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
        self.push(Op::RowDiffSqNorm(a, i, j), Tensor::scalar(d))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        // Lazily zero-initialises the parent's adjoint and hands out the buffer.
        let mut acc = |p: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[p.0].needs_grad {
                return;
            }
            let slot = &mut grads[p.0];
            let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[p.0].value.shape()));
            f(buf.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |buf| {
                    gemm_strided(m, n, k, gd, (n as isize, 1), bd, (1, n as isize), buf, 1.0)
                });
                acc(*b, &mut |buf| {
                    gemm_strided(k, m, n, ad, (1, k as isize), gd, (n as isize, 1), buf, 1.0)
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, &mut |buf| {
                    gemm_strided(m, n, k, gd, (n as isize, 1), bd, (k as isize, 1), buf, 1.0)
                });
                acc(*b, &mut |buf| {
                    gemm_strided(n, m, k, gd, (1, n as isize), ad, (k as isize, 1), buf, 1.0)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                acc(*b, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                acc(*b, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o -= g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * bd[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * ad[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] / bd[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= gd[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::AddRowBroadcast(x, b) => {
                let n = self.value(*b).len();
                acc(*x, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                acc(*b, &mut |buf| {
                    for row in gd.chunks(n) {
                        buf.iter_mut().zip(row).for_each(|(o, g)| *o += g);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += c * g));
            }
            Op::AddScalar(a) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
            }
            Op::Expand(s) => {
                let total: f64 = gd.iter().sum();
                acc(*s, &mut |buf| buf[0] += total);
            }
            Op::Exp(a) => {
                let yd = y.data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * yd[i];
                    }
                });
            }
            Op::Log(a) => {
                let xd = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] / xd[i];
                    }
                });
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        if xd[i] > 0.0 {
                            buf[i] += gd[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let yd = y.data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * (1.0 - yd[i] * yd[i]);
                    }
                });
            }
            Op::Square(a) => {
                let xd = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += 2.0 * xd[i] * gd[i];
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let xd = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        if xd[i] > *floor {
                            buf[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let g0 = gd[0] / n;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::RowSum(a) | Op::RowMean(a) => {
                let n = self.value(*a).cols();
                let div = if matches!(node.op, Op::RowMean(_)) { n as f64 } else { 1.0 };
                acc(*a, &mut |buf| {
                    for (row, gr) in buf.chunks_mut(n).zip(gd) {
                        row.iter_mut().for_each(|o| *o += gr / div);
                    }
                });
            }
            Op::LogSumExp(a) => {
                let xd = self.value(*a).data();
                let (g0, lse) = (gd[0], y.item());
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g0 * (xd[i] - lse).exp();
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let n = self.value(*a).cols();
                let xd = self.value(*a).data();
                let yd = y.data();
                acc(*a, &mut |buf| {
                    for (r, row) in buf.chunks_mut(n).enumerate() {
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += gd[r] * (xd[r * n + j] - yd[r]).exp();
                        }
                    }
                });
            }
            Op::LogSumExpWithExtra(x, e) => {
                let xd = self.value(*x).data();
                let ed = self.value(*e).data();
                let yd = y.data();
                acc(*x, &mut |buf| {
                    for k in 0..yd.len() {
                        for j in 0..buf.len() {
                            buf[j] += gd[k] * (xd[j] - yd[k]).exp();
                        }
                    }
                });
                acc(*e, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += gd[k] * (ed[k] - yd[k]).exp();
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let n = self.value(*a).cols();
                let xd = self.value(*a).data();
                let yd = y.data();
                acc(*a, &mut |buf| {
                    for r in 0..buf.len() / n {
                        let xr = &xd[r * n..(r + 1) * n];
                        let yr = &yd[r * n..(r + 1) * n];
                        let gr = &gd[r * n..(r + 1) * n];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            buf[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Gather(a, indices) => {
                acc(*a, &mut |buf| {
                    for (t, &i) in indices.iter().enumerate() {
                        buf[i] += gd[t];
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let n = self.value(*a).cols();
                acc(*a, &mut |buf| {
                    for (t, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            buf[r * n + j] += gd[t * n + j];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let slice = &gd[offset..offset + len];
                    acc(*p, &mut |buf| buf.iter_mut().zip(slice).for_each(|(o, g)| *o += g));
                    offset += len;
                }
            }
            Op::PairwiseSqDist(a) => {
                let m = self.value(*a).rows();
                let n = self.value(*a).cols();
                let xd = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        for j in 0..m {
                            let w = gd[i * m + j];
                            if w == 0.0 || i == j {
                                continue;
                            }
                            for c in 0..n {
                                let diff = 2.0 * w * (xd[i * n + c] - xd[j * n + c]);
                                buf[i * n + c] += diff;
                                buf[j * n + c] -= diff;
                            }
                        }
                    }
                });
            }
            Op::RowDiffSqNorm(a, i, j) => {
                let n = self.value(*a).cols();
                let xd = self.value(*a).data();
                let g0 = gd[0];
                let (i, j) = (*i, *j);
                acc(*a, &mut |buf| {
                    for c in 0..n {
                        let diff = 2.0 * g0 * (xd[i * n + c] - xd[j * n + c]);
                        buf[i * n + c] += diff;
                        buf[j * n + c] -= diff;
                    }
                });
            }
        }
        Ok(())
    }
}
