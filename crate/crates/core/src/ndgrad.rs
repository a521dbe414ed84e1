//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive as a node. [`Graph::grad`] walks the
//! recorded nodes backwards and emits each adjoint as *new graph nodes* built
//! from the same primitive set, so the gradients it returns are themselves
//! differentiable. Calling `grad` on a scalar function of a gradient gives
//! exact second-order derivatives (double backprop).
//!
//! Nodes only ever reference earlier nodes, so index order is a topological
//! order and the graph is acyclic by construction.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not a leaf and cannot be differentiated against")]
    NotALeaf(usize),
}

/// Handle to a node of a [`Graph`]. Cheap to copy; only meaningful for the
/// graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Something [`Graph::grad`] noticed but did not treat as fatal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    /// The requested input does not influence the loss; its gradient is zero.
    Unreachable { wrt: usize, loss: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    /// Heaviside step; derivative is zero almost everywhere.
    Step(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    LogSoftmax(Var),
    Sum(Var),
    Expand(Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf | Const => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddBias(a, b) => {
                [Some(a), Some(b)]
            }
            Transpose(a)
            | Scale(a, _)
            | Relu(a)
            | Step(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | LogSoftmax(a)
            | Sum(a)
            | Expand(a)
            | SumRows(a)
            | BroadcastRows(a)
            | SumCols(a)
            | BroadcastCols(a) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    diagnostics: Vec<Diagnostic>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    /// Errors if the value held by `v` contains NaN or infinity.
    pub fn check_finite(&self, v: Var) -> Result<(), GradError> {
        Ok(self.value(v).check_finite()?)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let value = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    /// `[m, n] + [n]`, broadcasting the vector over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, GradError> {
        let value = self.value(a).add_row_vector(self.value(bias))?;
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Elementwise `max(x, 0)`; identical to [`Graph::relu`].
    pub fn max_zero(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn step(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(value, Op::Step(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).log_softmax();
        self.push(value, Op::LogSoftmax(a))
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let src = self.value(a);
        if !src.is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                left: src.shape().to_vec(),
                right: shape.to_vec(),
            }
            .into());
        }
        let value = Tensor::full(shape, src.item());
        Ok(self.push(value, Op::Expand(a)))
    }

    /// `[m, n] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let value = self.value(a).sum_rows()?;
        Ok(self.push(value, Op::SumRows(a)))
    }

    /// `[n] -> [rows, n]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, GradError> {
        let value = self.value(a).broadcast_rows(rows)?;
        Ok(self.push(value, Op::BroadcastRows(a)))
    }

    /// Sums the trailing axis away.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_cols();
        self.push(value, Op::SumCols(a))
    }

    /// Appends a trailing axis of length `cols`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let value = self.value(a).broadcast_cols(cols);
        self.push(value, Op::BroadcastCols(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var, GradError> {
        let sq = self.dot(a, a)?;
        Ok(self.sqrt(sq))
    }

    /// Gradients of the scalar `loss` with respect to each leaf in `wrt`.
    ///
    /// The returned handles are ordinary graph nodes: their values are the
    /// exact reverse-mode gradients, and they can feed further computation
    /// that is differentiated again. Inputs the loss does not depend on get a
    /// zero constant and an [`Diagnostic::Unreachable`] entry.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>, GradError> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(GradError::NonScalarLoss(loss_shape));
        }
        for &w in wrt {
            if !matches!(self.nodes[w.0].op, Op::Leaf) {
                return Err(GradError::NotALeaf(w.0));
            }
        }

        let end = loss.0 + 1;
        // A node matters only if some requested leaf feeds into it.
        let mut active = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                active[w.0] = true;
            }
        }
        for i in 0..end {
            if !active[i] {
                active[i] = self.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|p| active[p.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        adjoint[loss.0] = Some(self.constant(Tensor::full(&loss_shape, 1.0)));

        for i in (0..end).rev() {
            let Some(d_out) = adjoint[i] else { continue };
            if !active[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            for (parent, contrib) in self.adjoint_rule(&op, out, d_out)? {
                if !active[parent.0] {
                    continue;
                }
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib)?,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint.get(w.0).copied().flatten() {
                Some(g) => grads.push(g),
                None => {
                    self.diagnostics.push(Diagnostic::Unreachable {
                        wrt: w.0,
                        loss: loss.0,
                    });
                    let zeros = Tensor::zeros(self.shape(w));
                    grads.push(self.constant(zeros));
                }
            }
        }
        Ok(grads)
    }

    /// Like [`Graph::grad`] but returns plain tensors.
    pub fn grad_values(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, GradError> {
        let grads = self.grad(loss, wrt)?;
        Ok(grads.into_iter().map(|g| self.value(g).clone()).collect())
    }

    /// Vector-Jacobian product of one node, expressed in graph primitives.
    fn adjoint_rule(&mut self, op: &Op, out: Var, d: Var) -> Result<Vec<(Var, Var)>, GradError> {
        use Op::*;
        Ok(match *op {
            Leaf | Const | Step(_) => vec![],
            MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let da = self.matmul(d, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, d)?;
                vec![(a, da), (b, db)]
            }
            Transpose(a) => vec![(a, self.transpose(d)?)],
            Add(a, b) => vec![(a, d), (b, d)],
            Sub(a, b) => vec![(a, d), (b, self.scale(d, -1.0))],
            Mul(a, b) => {
                let da = self.mul(d, b)?;
                let db = self.mul(d, a)?;
                vec![(a, da), (b, db)]
            }
            Div(a, b) => {
                // d(a/b)/db = -(a/b)/b
                let da = self.div(d, b)?;
                let t = self.mul(d, out)?;
                let t = self.div(t, b)?;
                vec![(a, da), (b, self.scale(t, -1.0))]
            }
            Scale(a, c) => vec![(a, self.scale(d, c))],
            AddBias(a, b) => vec![(a, d), (b, self.sum_rows(d)?)],
            Relu(a) => {
                let mask = self.step(a);
                vec![(a, self.mul(d, mask)?)]
            }
            Exp(a) => vec![(a, self.mul(d, out)?)],
            Log(a) => vec![(a, self.div(d, a)?)],
            Sqrt(a) => {
                let half = self.scale(d, 0.5);
                vec![(a, self.div(half, out)?)]
            }
            LogSoftmax(a) => {
                // da = d - softmax(a) * rowsum(d)
                let cols = self.value(a).rows_cols().1;
                let p = self.exp(out);
                let s = self.sum_cols(d);
                let s = self.broadcast_cols(s, cols);
                let ps = self.mul(p, s)?;
                vec![(a, self.sub(d, ps)?)]
            }
            Sum(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.expand(d, &shape)?)]
            }
            Expand(a) => {
                let s = self.sum(d);
                // keep the parent's exact (possibly non-scalar) one-element shape
                let shape = self.shape(a).to_vec();
                let s = if shape.is_empty() { s } else { self.expand(s, &shape)? };
                vec![(a, s)]
            }
            SumRows(a) => {
                let rows = self.shape(a)[0];
                vec![(a, self.broadcast_rows(d, rows)?)]
            }
            BroadcastRows(a) => vec![(a, self.sum_rows(d)?)],
            SumCols(a) => {
                let cols = self.value(a).rows_cols().1;
                vec![(a, self.broadcast_cols(d, cols))]
            }
            BroadcastCols(a) => vec![(a, self.sum_cols(d))],
        })
    }
}
