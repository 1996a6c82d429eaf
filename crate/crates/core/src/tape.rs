//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node whose parents already exist, so node order
//! is a topological order and [`Tape::backward`] is a single reverse sweep.
//! Constants and the output of [`Tape::stop_gradient`] do not require
//! gradients; no gradient is ever propagated through them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::tensor::{conv2d_3x3_backward, Tensor};

/// Handle to a node on a [`Tape`].
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
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv3x3(Var, Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    /// Sum over axes; `kept` is the input shape with reduced axes set to 1.
    Sum { x: Var, kept: Vec<usize> },
    Mean { x: Var, kept: Vec<usize>, count: usize },
    Broadcast(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    StopGradient(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Tensor, labels: Vec<usize> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::Conv3x3(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::Abs(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Broadcast(x)
            | Op::Reshape(x)
            | Op::StopGradient(x) => vec![*x],
            Op::Sum { x, .. } | Op::Mean { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached `v` (no differentiable path).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, with zeros of `like`'s shape when no path exists.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant | Op::StopGradient(_) => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (model weight, estimated scalar, ...).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    pub fn conv2d_3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let v = self.value(x).conv2d_3x3(self.value(kernel))?;
        Ok(self.push(v, Op::Conv3x3(x, kernel)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x))
    }

    /// Fails with a numeric-domain error on any negative element.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if let Some(bad) = input.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::NumericDomain(format!("sqrt of {bad}")));
        }
        let v = input.map(libm::sqrt);
        Ok(self.push(v, Op::Sqrt(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::fabs);
        self.push(v, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::exp);
        self.push(v, Op::Exp(x))
    }

    /// Fails with a numeric-domain error on any non-positive element.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if let Some(bad) = input.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::NumericDomain(format!("log of {bad}")));
        }
        let v = input.map(libm::log);
        Ok(self.push(v, Op::Ln(x)))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let input = self.value(x);
        let kept = input.sum_axes(axes, true)?.shape().to_vec();
        let v = input.sum_axes(axes, keepdim)?;
        Ok(self.push(v, Op::Sum { x, kept }))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let input = self.value(x);
        let kept = input.sum_axes(axes, true)?.shape().to_vec();
        let count = input.numel() / crate::tensor::numel_of(&kept).max(1);
        let v = input.mean_axes(axes, keepdim)?;
        Ok(self.push(v, Op::Mean { x, kept, count }))
    }

    /// Mean over every element; rank-0 result.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean_axes(x, &axes, false)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).broadcast_to(shape)?;
        Ok(self.push(v, Op::Broadcast(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice(axis, start, end)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Identity forward; blocks all gradient flow to `x` through this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient(x))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices,
    /// computed with log-sum-exp stabilization.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match z.shape() {
            &[n, k] if n == labels.len() && n > 0 => (n, k),
            s => return Err(config_err!("cross-entropy logits {:?} vs {} labels", s, labels.len())),
        };
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(config_err!("label {} out of range for {} classes", bad, k));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in z.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
            let lse = max + libm::log(sum);
            loss += lse - row[label];
            probs.extend(row.iter().map(|&v| libm::exp(v - lse)));
        }
        let probs = Tensor::new(vec![n, k], probs)?;
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// True when a gradient can flow from `output` back to `input`.
    pub fn depends_on(&self, output: Var, input: Var) -> bool {
        if !self.nodes[input.0].requires_grad || !self.nodes[output.0].requires_grad {
            return false;
        }
        let mut reach = vec![false; output.0 + 1];
        reach[output.0] = true;
        for id in (input.0..=output.0).rev() {
            if !reach[id] || !self.nodes[id].requires_grad {
                continue;
            }
            if id == input.0 {
                return true;
            }
            if let Op::StopGradient(_) = self.nodes[id].op {
                continue;
            }
            for p in self.nodes[id].op.parents() {
                if p.0 >= input.0 {
                    reach[p.0] = true;
                }
            }
        }
        false
    }

    /// Reverse sweep from a one-element `loss`. Each node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(config_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contribution) in self.vjp(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let slot = &mut grads[parent.0];
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(&contribution)?,
                    None => contribution,
                });
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node toward its parents.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let reduce = |t: Tensor, to: Var| t.sum_to_shape(self.value(to).shape());
        Ok(match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient(_) => Vec::new(),
            Op::Add(a, b) => vec![(*a, reduce(g.clone(), *a)?), (*b, reduce(g.clone(), *b)?)],
            Op::Sub(a, b) => vec![
                (*a, reduce(g.clone(), *a)?),
                (*b, reduce(g.map(|v| -v), *b)?),
            ],
            Op::Mul(a, b) => vec![
                (*a, reduce(g.mul(val(*b))?, *a)?),
                (*b, reduce(g.mul(val(*a))?, *b)?),
            ],
            Op::Div(a, b) => {
                let ga = g.div(val(*b))?;
                let gb = ga.mul(&node.value)?.map(|v| -v);
                vec![(*a, reduce(ga, *a)?), (*b, reduce(gb, *b)?)]
            }
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose2()?)?),
                (*b, val(*a).transpose2()?.matmul(g)?),
            ],
            Op::Conv3x3(x, k) => {
                let (gx, gk) = conv2d_3x3_backward(val(*x), val(*k), g)?;
                vec![(*x, gx), (*k, gk)]
            }
            Op::Relu(x) => vec![(*x, g.zip_with(val(*x), |g, a| if a > 0.0 { g } else { 0.0 })?)],
            Op::Square(x) => vec![(*x, g.zip_with(val(*x), |g, a| 2.0 * a * g)?)],
            Op::Sqrt(x) => vec![(*x, g.zip_with(&node.value, |g, s| g / (2.0 * s))?)],
            Op::Abs(x) => vec![(
                *x,
                g.zip_with(val(*x), |g, a| {
                    if a > 0.0 {
                        g
                    } else if a < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?,
            )],
            Op::Exp(x) => vec![(*x, g.mul(&node.value)?)],
            Op::Ln(x) => vec![(*x, g.div(val(*x))?)],
            Op::Sum { x, kept } => vec![(*x, g.reshape(kept)?.broadcast_to(val(*x).shape())?)],
            Op::Mean { x, kept, count } => {
                let inv = 1.0 / *count as f64;
                vec![(
                    *x,
                    g.reshape(kept)?.map(|v| v * inv).broadcast_to(val(*x).shape())?,
                )]
            }
            Op::Broadcast(x) => vec![(*x, reduce(g.clone(), *x)?)],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Slice { x, axis, start } => {
                let full = val(*x).shape();
                let len = g.shape()[*axis];
                let mut pieces = Vec::with_capacity(3);
                let mut pre = full.to_vec();
                pre[*axis] = *start;
                let mut post = full.to_vec();
                post[*axis] = full[*axis] - start - len;
                let zeros_pre = Tensor::zeros(&pre);
                let zeros_post = Tensor::zeros(&post);
                pieces.push(&zeros_pre);
                pieces.push(g);
                pieces.push(&zeros_post);
                vec![(*x, Tensor::concat(&pieces, *axis)?)]
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    out.push((*p, g.slice(*axis, offset, offset + len)?));
                    offset += len;
                }
                out
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = probs.shape()[1];
                let scale = g.item()? / labels.len() as f64;
                let mut d = probs.data().to_vec();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(probs.shape().to_vec(), d)?)]
            }
        })
    }
}
