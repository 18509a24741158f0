//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Each forward op pushes a node holding its value; inputs always precede
//! the node that consumes them, so insertion order is a topological order and
//! `backward` is a single reverse sweep. A tape covers one training step and
//! is dropped afterwards.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    Dot(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient entry.
    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// Trainable leaf. `backward` reports its gradient under `id`.
    pub fn param(&mut self, id: impl Into<String>, t: Tensor) -> NodeId {
        let node = self.push(Op::Leaf, t);
        self.params.push((id.into(), node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Adds bias vector `b` [n] to every row of `a` [m×n].
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 1 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim("add_bias", av.shape(), bv.shape()));
        }
        let n = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % n])
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.value(a).scale(alpha);
        self.push(Op::Scale(a, alpha), v)
    }

    /// Scalar inner product of two same-shape nodes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::dot(self.value(a), self.value(b))?;
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                lv.shape(),
                &[labels.len()],
            ));
        }
        let (batch, classes) = lv.dims2();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_sum = sum.ln();
            for (j, &z) in row.iter().enumerate() {
                probs[i * classes + j] = (z - max - log_sum).exp();
            }
            loss -= row[label] - max - log_sum;
        }
        let probs = Tensor::matrix(batch, classes, probs)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss / batch as f64)))
    }

    /// Gradients of the scalar `loss` node for every trainable parameter.
    ///
    /// Parameters the loss does not depend on get a zero tensor of their
    /// shape. Constant inputs created with [`Tape::var`] are not reported.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = tensor::matmul(&upstream, &self.value(*b).transpose())?;
                    let gb = tensor::matmul(&self.value(*a).transpose(), &upstream)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, upstream.transpose())?,
                Op::AddBias(a, b) => {
                    let (rows, cols) = upstream.dims2();
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for (g, &u) in gb.iter_mut().zip(upstream.row(r)) {
                            *g += u;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::vector(gb)?)?;
                    accumulate(&mut grads, *a, upstream)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone())?;
                    accumulate(&mut grads, *b, upstream)?;
                }
                Op::Relu(a) => {
                    // Subgradient at exactly 0 is 0.
                    let g = self
                        .value(*a)
                        .zip_map(&upstream, |x, u| if x > 0.0 { u } else { 0.0 })?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Tanh(a) => {
                    let g = node.value.zip_map(&upstream, |y, u| u * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(a, alpha) => accumulate(&mut grads, *a, upstream.scale(*alpha))?,
                Op::Dot(a, b) => {
                    let u = upstream.data()[0];
                    accumulate(&mut grads, *a, self.value(*b).scale(u))?;
                    accumulate(&mut grads, *b, self.value(*a).scale(u))?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let u = upstream.data()[0];
                    let (batch, classes) = probs.dims2();
                    let scale = u / batch as f64;
                    let mut g: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                    for (i, &label) in labels.iter().enumerate() {
                        g[i * classes + label] -= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::matrix(batch, classes, g)?)?;
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
                (name.clone(), g)
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    let slot = &mut grads[id.0];
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&g)?,
        None => g,
    });
    Ok(())
}
