//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every forward operation appends a node to a [`Tape`]; [`Tape::backward`]
//! then walks the nodes in reverse creation order, which is a valid reverse
//! topological order because a node can only reference earlier nodes. Each node
//! that lies on a path to the loss is visited exactly once.
//!
//! ```
//! use geomattn::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::iam::{self, IamSaved};
use crate::ops::{conv, linalg, loss, norm};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Softplus(Var),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d(conv::ConvSaved),
    GlobalAvgPool(Var),
    Rotate90 { input: Var, times: u8 },
    SpatialMul(Var, Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    L2Normalize { input: Var, axis: usize, norms: Vec<f64> },
    BatchNorm(norm::BnSaved),
    SoftTargetCrossEntropy { logits: Var, targets: Tensor },
    CrossEntropyProbs { probs: Var, labels: Vec<usize> },
    BatchHardTriplet(loss::TripletSaved),
    Iam(IamSaved),
}

/// A single-threaded recording of forward operations.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pushes an op node whose gradient requirement follows its inputs.
    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("left {:?} vs right {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let c = self.value(s).item();
        let v = self.map(a, |x| x * c);
        Ok(self.push(v, Op::MulScalar(a, s), &[a, s]))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// Elementwise `max(x, 0)`. The gradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x < 0.0 { 0.0 } else { x });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Concatenates rank-1 or rank-2 tensors along their last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let rank = self.value(first).rank();
        if rank != 1 && rank != 2 {
            return Err(Error::shape("concat", format!("rank {} unsupported", rank)));
        }
        let rows = if rank == 2 { self.shape(first)[0] } else { 1 };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || (rank == 2 && s[0] != rows) {
                return Err(Error::shape(
                    "concat",
                    format!("part shape {:?} incompatible with {:?}", s, self.shape(first)),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Runs reverse-mode differentiation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must hold one value, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, map(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, zip(g, self.value(*b), |p, q| p * q));
                }
                if self.needs(*b) {
                    acc(*b, zip(g, self.value(*a), |p, q| p * q));
                }
            }
            Op::Scale(a, c) => acc(*a, map(g, |x| x * c)),
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                if self.needs(*a) {
                    acc(*a, map(g, |x| x * c));
                }
                if self.needs(*s) {
                    let d: f64 = g.data().iter().zip(self.value(*a).data()).map(|(p, q)| p * q).sum();
                    acc(*s, Tensor::new(self.shape(*s).to_vec(), vec![d])?);
                }
            }
            Op::Softplus(a) => acc(*a, zip(g, self.value(*a), |p, x| p * sigmoid(x))),
            Op::Relu(a) => acc(*a, zip(g, self.value(*a), |p, x| if x > 0.0 { p } else { 0.0 })),
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a).to_vec())?),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a).to_vec(), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a).to_vec(), g.item() / n));
            }
            Op::Concat(parts) => {
                let total = *g.shape().last().unwrap();
                let rows = g.len() / total;
                let mut start = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        acc(p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    start += w;
                }
            }
            Op::MatMul(a, b) => {
                let (da, db) = linalg::matmul_backward(
                    g,
                    self.value(*a),
                    self.value(*b),
                    self.needs(*a),
                    self.needs(*b),
                );
                if let Some(da) = da {
                    acc(*a, da);
                }
                if let Some(db) = db {
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => acc(*a, linalg::transpose(g)),
            Op::Conv2d(saved) => {
                let input = self.value(saved.input);
                let kernel = self.value(saved.kernel);
                let out = conv::conv2d_backward(
                    saved,
                    g,
                    input,
                    kernel,
                    self.needs(saved.input),
                    self.needs(saved.kernel),
                );
                if let Some(d) = out.input {
                    acc(saved.input, d);
                }
                if let Some(d) = out.kernel {
                    acc(saved.kernel, d);
                }
                if let (Some(b), Some(d)) = (saved.bias, out.bias) {
                    if self.needs(b) {
                        acc(b, d);
                    }
                }
            }
            Op::GlobalAvgPool(a) => acc(*a, conv::gap_backward(g, self.shape(*a))),
            Op::Rotate90 { input, times } => {
                acc(*input, conv::rotate90_raw(g, (4 - times) % 4));
            }
            Op::SpatialMul(x, q) => {
                let (dx, dq) = conv::spatial_mul_backward(g, self.value(*x), self.value(*q));
                if self.needs(*x) {
                    acc(*x, dx);
                }
                if self.needs(*q) {
                    acc(*q, dq);
                }
            }
            Op::Softmax { input, axis } => {
                acc(*input, norm::softmax_backward(g, &node.value, *axis));
            }
            Op::LogSoftmax { input, axis } => {
                acc(*input, norm::log_softmax_backward(g, &node.value, *axis));
            }
            Op::L2Normalize { input, axis, norms } => {
                acc(*input, norm::l2_normalize_backward(g, &node.value, norms, *axis));
            }
            Op::BatchNorm(saved) => {
                let out = norm::batch_norm_backward(saved, g, self.value(saved.input));
                if self.needs(saved.input) {
                    acc(saved.input, out.input);
                }
                if let Some(gamma) = saved.gamma {
                    if self.needs(gamma) {
                        acc(gamma, out.gamma);
                    }
                }
                if let Some(beta) = saved.beta {
                    if self.needs(beta) {
                        acc(beta, out.beta);
                    }
                }
            }
            Op::SoftTargetCrossEntropy { logits, targets } => {
                acc(*logits, loss::soft_target_ce_backward(g, self.value(*logits), targets));
            }
            Op::CrossEntropyProbs { probs, labels } => {
                acc(*probs, loss::ce_probs_backward(g, self.value(*probs), labels));
            }
            Op::BatchHardTriplet(saved) => {
                acc(saved.embeddings, loss::triplet_backward(saved, g, self.value(saved.embeddings)));
            }
            Op::Iam(saved) => iam::backward(self, saved, g, &node.value, &mut acc),
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect(),
    )
    .unwrap()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
