//! Single-use Wengert tape for reverse-mode differentiation.
//!
//! A `Tape` records primitive ops as they execute and replays them in reverse
//! to accumulate gradients. Nodes are appended in topological order by
//! construction, so the backward pass is a single reverse sweep. Tapes are
//! confined to one logical thread and dropped after use; tensors themselves
//! are immutable values.

use crate::autodiff::Tensor;
use crate::error::{Result, VsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SqNorm(NodeId),
    ConcatCols(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    param: bool,
}

/// Gradients keyed by node id; only parameter leaves are exposed.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_leaf: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a parameter leaf. `None` for constants,
    /// interior nodes, and parameters the loss does not depend on.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        if self.param_leaf[id.0] {
            self.grads[id.0].as_ref()
        } else {
            None
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, param: bool) -> NodeId {
        self.nodes.push(Node { value, op, param });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that will not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that `backward` reports a gradient for.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), false))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).scale(c)?;
        Ok(self.push(v, Op::Scale(a, c), false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b), false))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(x).affine(self.value(w), self.value(b))?;
        Ok(self.push(v, Op::Affine { x, w, b }, false))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map_tanh()?;
        Ok(self.push(v, Op::Tanh(a), false))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map_relu()?;
        Ok(self.push(v, Op::Relu(a), false))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).sum();
        Ok(self.push(v, Op::Sum(a), false))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).mean();
        Ok(self.push(v, Op::Mean(a), false))
    }

    pub fn sqnorm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).sqnorm();
        Ok(self.push(v, Op::SqNorm(a), false))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), false))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// parameter leaf the loss depends on; other leaves are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(VsError::Tape("loss node is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(VsError::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient; put it back.
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g)?;
                    self.accumulate(&mut grads, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g)?;
                    self.accumulate(&mut grads, *b, &g.scale(-1.0)?)?;
                }
                Op::Mul(a, b) => {
                    self.accumulate(&mut grads, *a, &g.mul(self.value(*b))?)?;
                    self.accumulate(&mut grads, *b, &g.mul(self.value(*a))?)?;
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, &g.scale(*c)?)?;
                }
                Op::Matmul(a, b) => {
                    self.accumulate(&mut grads, *a, &g.matmul_nt(self.value(*b))?)?;
                    self.accumulate(&mut grads, *b, &self.value(*a).matmul_tn(&g)?)?;
                }
                Op::Affine { x, w, b } => {
                    self.accumulate(&mut grads, *x, &g.matmul_nt(self.value(*w))?)?;
                    self.accumulate(&mut grads, *w, &self.value(*x).matmul_tn(&g)?)?;
                    self.accumulate(&mut grads, *b, &g.col_sum()?)?;
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - y^2, with y the recorded output.
                    let y = &node.value;
                    let one_minus = Tensor::new(
                        y.shape().to_vec(),
                        y.data().iter().map(|&v| 1.0 - v * v).collect(),
                    )?;
                    self.accumulate(&mut grads, *a, &g.mul(&one_minus)?)?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mask = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                            .collect(),
                    )?;
                    self.accumulate(&mut grads, *a, &g.mul(&mask)?)?;
                }
                Op::Sum(a) => {
                    let gv = g.scalar_value()?;
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, &Tensor::full(shape, gv))?;
                }
                Op::Mean(a) => {
                    let gv = g.scalar_value()?;
                    let n = self.value(*a).numel() as f64;
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, &Tensor::full(shape, gv / n))?;
                }
                Op::SqNorm(a) => {
                    let gv = g.scalar_value()?;
                    self.accumulate(&mut grads, *a, &self.value(*a).scale(2.0 * gv)?)?;
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for part in parts {
                        let c = self.value(*part).cols();
                        let mut slice = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            let start = i * total + offset;
                            slice.extend_from_slice(&g.data()[start..start + c]);
                        }
                        let gp = Tensor::new(vec![rows, c], slice)?;
                        self.accumulate(&mut grads, *part, &gp)?;
                        offset += c;
                    }
                }
            }
        }

        Ok(Gradients {
            grads,
            param_leaf: self
                .nodes
                .iter()
                .map(|n| n.param && matches!(n.op, Op::Leaf))
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => existing.acc(g),
            slot @ None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }
}
