//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its nodes. Leaves are
//! created with [`Graph::leaf`] (differentiable) or [`Graph::constant`];
//! every other node is produced by one of the operation methods and keeps
//! its forward value. [`Graph::backward`] walks the recording in reverse
//! and returns a [`Gradients`] map for all nodes.
//!
//! Only the shapes used by the objectives in this crate are supported:
//! scalars (`[]`), vectors (`[n]`) and matrices (`[n, m]`). The single
//! broadcast rule is adding a `[m]` row vector to every row of a `[n, m]`
//! matrix.
//!
//! ```
//! use nac::tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![3.0]));
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[6.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    Shape { kind: OpKind, shapes: Vec<Vec<usize>> },
    #[error("{kind}: {detail}")]
    Domain { kind: OpKind, detail: String },
    #[error("{kind}: non-finite value in forward output")]
    NonFiniteForward { kind: OpKind },
    #[error("non-finite gradient produced while differentiating {kind}")]
    NonFiniteGradient { kind: OpKind },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor shape {shape:?} does not match {len} values")]
    Length { shape: Vec<usize>, len: usize },
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    Step(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a matrix from equally long rows. An empty slice yields `[0, 0]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Length {
                    shape: vec![rows.len(), cols],
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    /// The single element of a scalar or one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a · b` (or `a · bᵀ` when `transpose_rhs`) for row-major matrices.
    pub fn matmul(&self, rhs: &Tensor, transpose_rhs: bool) -> Result<Tensor> {
        let kind = OpKind::MatMul { transpose_rhs };
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(shape_err(kind, &[self, rhs]));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let (kr, m) = if transpose_rhs {
            (rhs.shape[1], rhs.shape[0])
        } else {
            (rhs.shape[0], rhs.shape[1])
        };
        if k != kr {
            return Err(shape_err(kind, &[self, rhs]));
        }
        let mut out = vec![0.0; n * m];
        if transpose_rhs {
            for i in 0..n {
                let a = &self.data[i * k..(i + 1) * k];
                for j in 0..m {
                    let b = &rhs.data[j * k..(j + 1) * k];
                    out[i * m + j] = dot(a, b);
                }
            }
        } else {
            for i in 0..n {
                let o = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let a = self.data[i * k + p];
                    if a == 0.0 {
                        continue;
                    }
                    let b = &rhs.data[p * m..(p + 1) * m];
                    for (oj, bj) in o.iter_mut().zip(b) {
                        *oj += a * bj;
                    }
                }
            }
        }
        Ok(Tensor::matrix(n, m, out))
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::matrix(m, n, out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted `ln Σ exp(xᵢ)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn shape_err(kind: OpKind, ts: &[&Tensor]) -> TensorError {
    TensorError::Shape {
        kind,
        shapes: ts.iter().map(|t| t.shape.clone()).collect(),
    }
}

/// Identifier of a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul { transpose_rhs: bool },
    Add,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Log,
    Exp,
    Neg,
    Scale(f64),
    Mul,
    RowDot,
    ScaleRows,
    Pow(f64),
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    LogSumExp { axis: usize },
    Square,
    L2NormSq,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Leaf => write!(f, "leaf"),
            OpKind::MatMul { transpose_rhs: false } => write!(f, "matmul"),
            OpKind::MatMul { transpose_rhs: true } => write!(f, "matmul_t"),
            OpKind::Add => write!(f, "add"),
            OpKind::Relu => write!(f, "relu"),
            OpKind::Tanh => write!(f, "tanh"),
            OpKind::Sigmoid => write!(f, "sigmoid"),
            OpKind::Softplus => write!(f, "softplus"),
            OpKind::Log => write!(f, "log"),
            OpKind::Exp => write!(f, "exp"),
            OpKind::Neg => write!(f, "negate"),
            OpKind::Scale(c) => write!(f, "scale({c})"),
            OpKind::Mul => write!(f, "mul"),
            OpKind::RowDot => write!(f, "row_dot"),
            OpKind::ScaleRows => write!(f, "scale_rows"),
            OpKind::Pow(e) => write!(f, "pow({e})"),
            OpKind::Sum { axis } => write!(f, "sum(axis={axis:?})"),
            OpKind::Mean { axis } => write!(f, "mean(axis={axis:?})"),
            OpKind::LogSumExp { axis } => write!(f, "logsumexp(axis={axis})"),
            OpKind::Square => write!(f, "square"),
            OpKind::L2NormSq => write!(f, "l2_norm_sq"),
        }
    }
}

struct Node {
    kind: OpKind,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Recording of operations in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, Vec::new(), value, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, Vec::new(), value, false)
    }

    /// A constant copy of `id`'s current value, cutting the gradient path.
    pub fn detach(&self, id: NodeId) -> NodeId {
        let value = self.value(id).clone();
        self.constant(value)
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.value(id).shape.clone()
    }

    fn push(&self, kind: OpKind, parents: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            kind,
            parents,
            value,
            requires_grad,
        });
        NodeId(nodes.len() - 1)
    }

    fn record(&self, kind: OpKind, parents: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteForward { kind });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        Ok(self.push(kind, parents, value, requires_grad))
    }

    fn unary(&self, kind: OpKind, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let out = self.value(x).map(f);
        self.record(kind, vec![x], out)
    }

    /// Dispatches on `kind` for the unary and binary elementwise kinds.
    pub fn forward(&self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Domain {
                    kind,
                    detail: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            OpKind::Leaf => Err(TensorError::Domain {
                kind,
                detail: "leaves are created with leaf() or constant()".into(),
            }),
            OpKind::MatMul { transpose_rhs } => {
                arity(2)?;
                if transpose_rhs {
                    self.matmul_t(inputs[0], inputs[1])
                } else {
                    self.matmul(inputs[0], inputs[1])
                }
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::RowDot => {
                arity(2)?;
                self.row_dot(inputs[0], inputs[1])
            }
            OpKind::ScaleRows => {
                arity(2)?;
                self.scale_rows(inputs[0], inputs[1])
            }
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Softplus => arity(1).and_then(|_| self.softplus(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Neg => arity(1).and_then(|_| self.neg(inputs[0])),
            OpKind::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], c)),
            OpKind::Pow(e) => arity(1).and_then(|_| self.pow(inputs[0], e)),
            OpKind::Sum { axis } => arity(1).and_then(|_| self.reduce(inputs[0], axis, false)),
            OpKind::Mean { axis } => arity(1).and_then(|_| self.reduce(inputs[0], axis, true)),
            OpKind::LogSumExp { axis } => arity(1).and_then(|_| self.logsumexp(inputs[0], axis)),
            OpKind::Square => arity(1).and_then(|_| self.square(inputs[0])),
            OpKind::L2NormSq => arity(1).and_then(|_| self.l2_norm_sq(inputs[0])),
        }
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(&self.value(b), false)?;
        self.record(OpKind::MatMul { transpose_rhs: false }, vec![a, b], out)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(&self.value(b), true)?;
        self.record(OpKind::MatMul { transpose_rhs: true }, vec![a, b], out)
    }

    /// Elementwise sum; a `[m]` operand is broadcast over the rows of a `[n, m]` one.
    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape == vb.shape {
                Tensor {
                    shape: va.shape.clone(),
                    data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
                }
            } else if let Some((mat, row)) = broadcast_pair(&va, &vb) {
                let m = row.len();
                Tensor {
                    shape: mat.shape.clone(),
                    data: mat
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x + row.data[i % m])
                        .collect(),
                }
            } else {
                return Err(shape_err(OpKind::Add, &[&va, &vb]));
            }
        };
        self.record(OpKind::Add, vec![a, b], out)
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn relu(&self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Relu, x, |v| v.max(0.0))
    }

    pub fn tanh(&self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Tanh, x, f64::tanh)
    }

    pub fn sigmoid(&self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Sigmoid, x, sigmoid)
    }

    pub fn softplus(&self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Softplus, x, softplus)
    }

    pub fn log(&self, x: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(x).data.iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                kind: OpKind::Log,
                detail: format!("logarithm of non-positive value {bad}"),
            });
        }
        self.unary(OpKind::Log, x, f64::ln)
    }

    pub fn exp(&self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Exp, x, f64::exp)
    }

    pub fn neg(&self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Neg, x, |v| -v)
    }

    pub fn scale(&self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(OpKind::Scale(c), x, |v| c * v)
    }

    pub fn square(&self, x: NodeId) -> Result<NodeId> {
        self.unary(OpKind::Square, x, |v| v * v)
    }

    /// Elementwise power. Non-integer exponents require positive inputs.
    pub fn pow(&self, x: NodeId, exponent: f64) -> Result<NodeId> {
        if exponent.fract() != 0.0 {
            if let Some(bad) = self.value(x).data.iter().find(|&&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    kind: OpKind::Pow(exponent),
                    detail: format!("fractional power of non-positive value {bad}"),
                });
            }
        }
        self.unary(OpKind::Pow(exponent), x, |v| v.powf(exponent))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape != vb.shape {
                return Err(shape_err(OpKind::Mul, &[&va, &vb]));
            }
            Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
            }
        };
        self.record(OpKind::Mul, vec![a, b], out)
    }

    /// Per-row dot product of two `[n, m]` matrices, giving `[n]`.
    pub fn row_dot(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape.len() != 2 || va.shape != vb.shape {
                return Err(shape_err(OpKind::RowDot, &[&va, &vb]));
            }
            Tensor::vector((0..va.rows()).map(|i| dot(va.row(i), vb.row(i))).collect())
        };
        self.record(OpKind::RowDot, vec![a, b], out)
    }

    /// Multiplies row `i` of `[n, m]` matrix `a` by `s[i]`.
    pub fn scale_rows(&self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let out = {
            let (va, vs) = (self.value(a), self.value(s));
            if va.shape.len() != 2 || vs.shape != [va.shape[0]] {
                return Err(shape_err(OpKind::ScaleRows, &[&va, &vs]));
            }
            let m = va.cols();
            Tensor {
                shape: va.shape.clone(),
                data: va
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * vs.data[i / m])
                    .collect(),
            }
        };
        self.record(OpKind::ScaleRows, vec![a, s], out)
    }

    pub fn sum(&self, x: NodeId) -> Result<NodeId> {
        self.reduce(x, None, false)
    }

    pub fn sum_axis(&self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean(&self, x: NodeId) -> Result<NodeId> {
        self.reduce(x, None, true)
    }

    pub fn mean_axis(&self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, Some(axis), true)
    }

    fn reduce(&self, x: NodeId, axis: Option<usize>, average: bool) -> Result<NodeId> {
        let kind = if average {
            OpKind::Mean { axis }
        } else {
            OpKind::Sum { axis }
        };
        let out = {
            let v = self.value(x);
            match axis {
                None => {
                    if v.is_empty() {
                        return Err(shape_err(kind, &[&v]));
                    }
                    let s: f64 = v.data.iter().sum();
                    Tensor::scalar(if average { s / v.len() as f64 } else { s })
                }
                Some(ax) => {
                    let (lanes, width) = reduction_layout(&v, ax).ok_or_else(|| shape_err(kind, &[&v]))?;
                    let div = if average { width as f64 } else { 1.0 };
                    let data = (0..lanes)
                        .map(|l| lane(&v, ax, l).map(|i| v.data[i]).sum::<f64>() / div)
                        .collect();
                    reduced(&v, ax, data)
                }
            }
        };
        self.record(kind, vec![x], out)
    }

    /// Max-subtracted log-sum-exp along `axis`.
    pub fn logsumexp(&self, x: NodeId, axis: usize) -> Result<NodeId> {
        let kind = OpKind::LogSumExp { axis };
        let out = {
            let v = self.value(x);
            let (lanes, _) = reduction_layout(&v, axis).ok_or_else(|| shape_err(kind, &[&v]))?;
            let data = (0..lanes)
                .map(|l| {
                    let xs: Vec<f64> = lane(&v, axis, l).map(|i| v.data[i]).collect();
                    log_sum_exp(&xs)
                })
                .collect();
            reduced(&v, axis, data)
        };
        self.record(kind, vec![x], out)
    }

    /// Squared Euclidean norm: scalar for a vector, `[n]` for a matrix.
    pub fn l2_norm_sq(&self, x: NodeId) -> Result<NodeId> {
        let out = {
            let v = self.value(x);
            match v.shape.len() {
                1 => Tensor::scalar(dot(&v.data, &v.data)),
                2 => Tensor::vector((0..v.rows()).map(|i| dot(v.row(i), v.row(i))).collect()),
                _ => return Err(shape_err(OpKind::L2NormSq, &[&v])),
            }
        };
        self.record(OpKind::L2NormSq, vec![x], out)
    }

    /// Signs of every ReLU input recorded so far, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter(|n| n.kind == OpKind::Relu)
            .flat_map(|n| nodes[n.parents[0].0].value.data.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if node.kind == OpKind::Leaf || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = backward_rule(node, &nodes, &g);
            grads[idx] = Some(g);
            for (parent, delta) in node.parents.iter().zip(contributions) {
                let Some(delta) = delta else { continue };
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                if delta.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient { kind: node.kind });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn broadcast_pair<'a>(a: &'a Tensor, b: &'a Tensor) -> Option<(&'a Tensor, &'a Tensor)> {
    if a.shape.len() == 2 && b.shape.len() == 1 && a.shape[1] == b.shape[0] {
        Some((a, b))
    } else if b.shape.len() == 2 && a.shape.len() == 1 && b.shape[1] == a.shape[0] {
        Some((b, a))
    } else {
        None
    }
}

/// (number of output lanes, lane width) for a reduction over `axis`.
fn reduction_layout(v: &Tensor, axis: usize) -> Option<(usize, usize)> {
    match (v.shape.len(), axis) {
        (1, 0) if v.shape[0] > 0 => Some((1, v.shape[0])),
        (2, 0) if v.shape[0] > 0 => Some((v.shape[1], v.shape[0])),
        (2, 1) if v.shape[1] > 0 => Some((v.shape[0], v.shape[1])),
        _ => None,
    }
}

/// Flat indices of lane `l` of a reduction over `axis`.
fn lane(v: &Tensor, axis: usize, l: usize) -> impl Iterator<Item = usize> {
    let (rows, cols) = (v.rows(), v.cols());
    let (start, step, count) = match (v.shape.len(), axis) {
        (1, _) => (0, 1, cols),
        (_, 0) => (l, cols, rows),
        _ => (l * cols, 1, cols),
    };
    (0..count).map(move |k| start + k * step)
}

fn reduced(v: &Tensor, axis: usize, data: Vec<f64>) -> Tensor {
    if v.shape.len() == 1 {
        debug_assert_eq!(axis, 0);
        Tensor::scalar(data[0])
    } else {
        Tensor::vector(data)
    }
}

/// Gradient contributions of `node` to each parent given upstream `g`.
fn backward_rule(node: &Node, nodes: &[Node], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let pv = |i: usize| &nodes[node.parents[i].0].value;
    let y = &node.value;
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match node.kind {
        OpKind::Leaf => Vec::new(),
        OpKind::MatMul { transpose_rhs } => {
            let (a, b) = (pv(0), pv(1));
            let gt = Tensor::matrix(y.rows(), y.cols(), g.to_vec());
            let (da, db) = if transpose_rhs {
                // y = a bᵀ: da = g b, db = gᵀ a
                (
                    gt.matmul(b, false).expect("matmul_t backward"),
                    gt.transpose().matmul(a, false).expect("matmul_t backward"),
                )
            } else {
                // y = a b: da = g bᵀ, db = aᵀ g
                (
                    gt.matmul(b, true).expect("matmul backward"),
                    a.transpose().matmul(&gt, false).expect("matmul backward"),
                )
            };
            vec![Some(da.data), Some(db.data)]
        }
        OpKind::Add => {
            let (a, b) = (pv(0), pv(1));
            let fold = |t: &Tensor| -> Vec<f64> {
                if t.shape == y.shape {
                    g.to_vec()
                } else {
                    let m = t.len();
                    let mut acc = vec![0.0; m];
                    for (i, gi) in g.iter().enumerate() {
                        acc[i % m] += gi;
                    }
                    acc
                }
            };
            vec![Some(fold(a)), Some(fold(b))]
        }
        OpKind::Relu => {
            let x = pv(0);
            elementwise(&|i| if x.data[i] > 0.0 { 1.0 } else { 0.0 })
        }
        OpKind::Tanh => elementwise(&|i| 1.0 - y.data[i] * y.data[i]),
        OpKind::Sigmoid => elementwise(&|i| y.data[i] * (1.0 - y.data[i])),
        OpKind::Softplus => {
            let x = pv(0);
            elementwise(&|i| sigmoid(x.data[i]))
        }
        OpKind::Log => {
            let x = pv(0);
            elementwise(&|i| 1.0 / x.data[i])
        }
        OpKind::Exp => elementwise(&|i| y.data[i]),
        OpKind::Neg => elementwise(&|_| -1.0),
        OpKind::Scale(c) => elementwise(&|_| c),
        OpKind::Square => {
            let x = pv(0);
            elementwise(&|i| 2.0 * x.data[i])
        }
        OpKind::Pow(e) => {
            let x = pv(0);
            elementwise(&|i| e * x.data[i].powf(e - 1.0))
        }
        OpKind::Mul => {
            let (a, b) = (pv(0), pv(1));
            vec![
                Some(g.iter().zip(&b.data).map(|(gi, bi)| gi * bi).collect()),
                Some(g.iter().zip(&a.data).map(|(gi, ai)| gi * ai).collect()),
            ]
        }
        OpKind::RowDot => {
            let (a, b) = (pv(0), pv(1));
            let m = a.cols();
            vec![
                Some((0..a.len()).map(|i| g[i / m] * b.data[i]).collect()),
                Some((0..b.len()).map(|i| g[i / m] * a.data[i]).collect()),
            ]
        }
        OpKind::ScaleRows => {
            let (a, s) = (pv(0), pv(1));
            let m = a.cols();
            let da = (0..a.len()).map(|i| g[i] * s.data[i / m]).collect();
            let ds = (0..s.len())
                .map(|r| (0..m).map(|j| g[r * m + j] * a.data[r * m + j]).sum())
                .collect();
            vec![Some(da), Some(ds)]
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let x = pv(0);
            let average = matches!(node.kind, OpKind::Mean { .. });
            let mut dx = vec![0.0; x.len()];
            match axis {
                None => {
                    let d = if average { g[0] / x.len() as f64 } else { g[0] };
                    dx.iter_mut().for_each(|v| *v = d);
                }
                Some(ax) => {
                    let (lanes, width) = reduction_layout(x, ax).expect("validated in forward");
                    let div = if average { width as f64 } else { 1.0 };
                    for (l, gl) in g.iter().enumerate().take(lanes) {
                        for i in lane(x, ax, l) {
                            dx[i] = gl / div;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        OpKind::LogSumExp { axis } => {
            let x = pv(0);
            let (lanes, _) = reduction_layout(x, axis).expect("validated in forward");
            let mut dx = vec![0.0; x.len()];
            for (l, gl) in g.iter().enumerate().take(lanes) {
                let lse = y.data[l];
                for i in lane(x, axis, l) {
                    dx[i] = gl * (x.data[i] - lse).exp();
                }
            }
            vec![Some(dx)]
        }
        OpKind::L2NormSq => {
            let x = pv(0);
            let m = x.cols();
            let per_row = x.shape.len() == 2;
            vec![Some(
                (0..x.len())
                    .map(|i| 2.0 * x.data[i] * if per_row { g[i / m] } else { g[0] })
                    .collect(),
            )]
        }
    }
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when `id` is not on a path to the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input index, coordinate)` pairs whose perturbation crosses a ReLU kink.
    pub skipped: Vec<(usize, usize)>,
    pub passed: bool,
}

pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// A coordinate passes when its absolute error is at most
/// [`GRAD_CHECK_ABS_FLOOR`] or its relative error is at most `tol`.
/// Coordinates whose `±h` perturbation changes any ReLU activation pattern
/// sit on (or within `h` of) a kink and are skipped.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(TensorError::Step(h));
    }
    let eval = |xs: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &ids)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(TensorError::NotScalar(v.shape.clone()));
        }
        Ok((v.data[0], g.relu_pattern()))
    };

    let g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &ids)?;
    let grads = g.backward(out)?;
    let base_pattern = g.relu_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        skipped: Vec::new(),
        passed: true,
    };
    let mut xs = inputs.to_vec();
    for (t, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for c in 0..xs[t].len() {
            let orig = xs[t].data[c];
            xs[t].data[c] = orig + h;
            let (fp, pp) = eval(&xs)?;
            xs[t].data[c] = orig - h;
            let (fm, pm) = eval(&xs)?;
            xs[t].data[c] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped.push((t, c));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > GRAD_CHECK_ABS_FLOOR {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > tol {
                    report.passed = false;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_tanh_logsumexp_forward() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = g.constant(Tensor::vector(vec![0.0]));
        let t = g.tanh(z).unwrap();
        assert_eq!(g.value(t).data(), &[0.0]);

        let zz = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = g.logsumexp(zz, 0).unwrap();
        assert!(close(g.value(l).item(), std::f64::consts::LN_2, 1e-15));
        assert!(g.value(l).shape().is_empty());
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let l = g.logsumexp(x, 0).unwrap();
        assert!(close(g.value(l).item(), 1000.0 + std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn simple_backward_rules() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).data(), &[6.0]);

        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-2.0]));
        let r = g.relu(x).unwrap();
        let loss = g.sum(r).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).data(), &[0.0]);
    }

    #[test]
    fn tanh_gradient_matches_finite_difference() {
        // central difference with h = 1e-5, computed independently
        let h = 1e-5;
        let fd = ((0.5f64 + h).tanh() - (0.5f64 - h).tanh()) / (2.0 * h);
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.5]));
        let t = g.tanh(x).unwrap();
        let loss = g.sum(t).unwrap();
        let analytic = g.backward(loss).unwrap().get(x).item();
        assert!(close(analytic, fd, 1e-9));
        assert!(close(analytic, 0.7864, 1e-4));
    }

    #[test]
    fn unreachable_leaves_get_zero_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.leaf(Tensor::matrix(2, 2, vec![1.0; 4]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_the_kind() {
        let g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul:"), "{err}");
        let c = g.constant(Tensor::vector(vec![0.0; 2]));
        let err = g.add(a, c).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { kind: OpKind::Log, .. })));
    }

    #[test]
    fn overflow_is_reported_not_propagated() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(g.exp(x), Err(TensorError::NonFiniteForward { kind: OpKind::Exp })));
    }

    #[test]
    fn bias_broadcast_forward_and_backward() {
        let g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(Tensor::vector(vec![10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let loss = g.sum(y).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn forward_dispatch_matches_direct_calls() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-0.5, 0.25]));
        let a = g.forward(OpKind::Sigmoid, &[x]).unwrap();
        let b = g.sigmoid(x).unwrap();
        assert_eq!(*g.value(a), *g.value(b));
        assert!(g.forward(OpKind::Add, &[x]).is_err());
    }

    #[test]
    fn grad_check_on_quadratic_form_passes() {
        let q = Tensor::matrix(2, 2, vec![2.0, 0.5, 0.5, 1.0]);
        let f = |g: &Graph, xs: &[NodeId]| {
            let qn = g.constant(q.clone());
            let qx = g.matmul(xs[0], qn)?;
            let prod = g.mul(qx, xs[0])?;
            g.sum(prod)
        };
        let x = Tensor::matrix(1, 2, vec![0.3, -1.2]);
        let report = grad_check(f, &[x], 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn grad_check_skips_kink_coordinates() {
        let f = |g: &Graph, xs: &[NodeId]| {
            let r = g.relu(xs[0])?;
            g.sum(r)
        };
        let x = Tensor::vector(vec![0.0, 1.0]);
        let report = grad_check(f, &[x], 1e-5, 1e-4).unwrap();
        assert_eq!(report.skipped, vec![(0, 0)]);
        assert_eq!(report.checked, 1);
        assert!(report.passed);
    }

    #[test]
    fn grad_check_rejects_bad_step_and_non_scalar() {
        let f = |_: &Graph, xs: &[NodeId]| Ok(xs[0]);
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(grad_check(f, std::slice::from_ref(&x), 1e-2, 1e-4), Err(TensorError::Step(_))));
        assert!(matches!(grad_check(f, &[x], 1e-5, 1e-4), Err(TensorError::NotScalar(_))));
    }
}
