//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records every primitive executed on it in topological order.
//! [`Tape::backward`] walks the record in reverse and returns a gradient for
//! every leaf; [`grad_check`] compares those gradients against central
//! finite differences.

mod gradcheck;
mod kernels;
mod optim;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

/// Name of a primitive, used in records and error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    MatMul,
    Conv2d,
    Upsample2x,
    BiasAdd,
    Add,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Mse,
    SoftmaxCrossEntropy,
    Reshape,
    SpatialMean,
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpTag::Leaf => "leaf",
            OpTag::MatMul => "matmul",
            OpTag::Conv2d => "conv2d",
            OpTag::Upsample2x => "upsample2x",
            OpTag::BiasAdd => "bias_add",
            OpTag::Add => "add",
            OpTag::Mul => "mul",
            OpTag::Scale => "scale",
            OpTag::Relu => "relu",
            OpTag::Sigmoid => "sigmoid",
            OpTag::Tanh => "tanh",
            OpTag::Softmax => "softmax",
            OpTag::Mse => "mse",
            OpTag::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpTag::Reshape => "reshape",
            OpTag::SpatialMean => "spatial_mean",
        };
        f.write_str(name)
    }
}

/// A differentiable primitive together with its static arguments.
///
/// Shape rules:
/// - `MatMul`: `[n,k] x [k,m] -> [n,m]`
/// - `Conv2d`: `[N,C,H,W] * [O,C,3,3] -> [N,O,H',W']`, zero padding 1,
///   `H' = (H-1)/stride + 1`
/// - `Upsample2x`: nearest neighbour, `[N,C,H,W] -> [N,C,2H,2W]`
/// - `BiasAdd`: `[N,C,...] + [C]`, the only broadcasting primitive
/// - `Add`, `Mul`, `Mse`: operands of identical shape
/// - `Softmax`: over the last axis
/// - `SoftmaxCrossEntropy`: `[N,K]` logits against `N` class indices, mean
/// - `SpatialMean`: `[N,C,H,W] -> [N,C]`
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv2d { stride: usize },
    Upsample2x,
    BiasAdd,
    Add,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Mse,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Reshape { shape: Vec<usize> },
    SpatialMean,
}

impl Primitive {
    pub fn tag(&self) -> OpTag {
        match self {
            Primitive::MatMul => OpTag::MatMul,
            Primitive::Conv2d { .. } => OpTag::Conv2d,
            Primitive::Upsample2x => OpTag::Upsample2x,
            Primitive::BiasAdd => OpTag::BiasAdd,
            Primitive::Add => OpTag::Add,
            Primitive::Mul => OpTag::Mul,
            Primitive::Scale(_) => OpTag::Scale,
            Primitive::Relu => OpTag::Relu,
            Primitive::Sigmoid => OpTag::Sigmoid,
            Primitive::Tanh => OpTag::Tanh,
            Primitive::Softmax => OpTag::Softmax,
            Primitive::Mse => OpTag::Mse,
            Primitive::SoftmaxCrossEntropy { .. } => OpTag::SoftmaxCrossEntropy,
            Primitive::Reshape { .. } => OpTag::Reshape,
            Primitive::SpatialMean => OpTag::SpatialMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible input shapes {shapes:?}")]
    ShapeMismatch { op: OpTag, shapes: Vec<Vec<usize>> },
    #[error("{op}: expected {expected} inputs, got {actual}")]
    Arity {
        op: OpTag,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: OpTag, reason: &'static str },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: OpTag },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable does not belong to this record")]
    ForeignVariable,
    #[error("replay needs {expected} leaf values, got {actual}")]
    LeafCount { expected: usize, actual: usize },
    #[error("gradient {index} has shape {gradient:?}, parameter has {parameter:?}")]
    GradientShape {
        index: usize,
        gradient: Vec<usize>,
        parameter: Vec<usize>,
    },
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("learning rate must be positive and finite")]
    InvalidLearningRate,
    #[error("function value is not finite at probe point {index}")]
    NonFiniteProbe { index: usize },
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
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
enum NodeKind {
    Leaf { trainable: bool },
    Op { primitive: Primitive, inputs: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    value: Tensor,
    requires_grad: bool,
}

/// Computation record: primitives in execution order with their values.
#[derive(Debug, Clone)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, kind: NodeKind, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(AutodiffError::ForeignVariable)
        }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Leaf { trainable: false }, value, false)
    }

    /// A trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Leaf { trainable: true }, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn op_tag(&self, v: Var) -> OpTag {
        match &self.nodes[v.index].kind {
            NodeKind::Leaf { .. } => OpTag::Leaf,
            NodeKind::Op { primitive, .. } => primitive.tag(),
        }
    }

    /// Executes `primitive` on `inputs` and records it.
    pub fn apply(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let mut idx = Vec::with_capacity(inputs.len());
        for v in inputs {
            idx.push(self.check(*v)?);
        }
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = kernels::forward(&primitive, &values)?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(
            NodeKind::Op {
                primitive,
                inputs: idx,
            },
            out,
            requires_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Conv2d { stride }, &[x, w])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Upsample2x, &[x])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::BiasAdd, &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Scale(factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Mse, &[a, b])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(
            Primitive::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn spatial_mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::SpatialMean, &[x])
    }

    /// Leaves in recording order.
    pub fn leaves(&self) -> impl Iterator<Item = (Var, bool)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(index, n)| match n.kind {
            NodeKind::Leaf { trainable } => Some((Var { tape: self.id, index }, trainable)),
            NodeKind::Op { .. } => None,
        })
    }

    /// Re-executes the record with its current leaf values.
    pub fn replay(&self) -> Result<Tape, AutodiffError> {
        let leaves: Vec<Tensor> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .map(|n| n.value.clone())
            .collect();
        self.replay_with(&leaves)
    }

    /// Re-executes the record with new leaf values, given in leaf order.
    pub fn replay_with(&self, leaf_values: &[Tensor]) -> Result<Tape, AutodiffError> {
        let expected = self.leaves().count();
        if expected != leaf_values.len() {
            return Err(AutodiffError::LeafCount {
                expected,
                actual: leaf_values.len(),
            });
        }
        let mut out = Tape::new();
        let mut next_leaf = leaf_values.iter();
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Leaf { trainable } => {
                    let v = next_leaf.next().expect("counted").clone();
                    if *trainable {
                        out.parameter(v);
                    } else {
                        out.constant(v);
                    }
                }
                NodeKind::Op { primitive, inputs } => {
                    let vars: Vec<Var> = inputs.iter().map(|&index| Var { tape: out.id, index }).collect();
                    out.apply(primitive.clone(), &vars)?;
                }
            }
        }
        Ok(out)
    }

    /// The variable at the same record position as `v`, which may come from
    /// the tape this one was replayed from.
    pub fn corresponding(&self, v: Var) -> Var {
        Var {
            tape: self.id,
            index: v.index,
        }
    }

    /// Bitwise comparison of every recorded value.
    pub fn values_bit_eq(&self, other: &Tape) -> bool {
        self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| a.value.bit_eq(&b.value))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[li].requires_grad {
            grads[li] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op { primitive, inputs } = &node.kind else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let values: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = kernels::backward(primitive, &values, &node.value, &g, &needs);
            for ((&j, ig), need) in inputs.iter().zip(input_grads).zip(needs) {
                let (Some(ig), true) = (ig, need) else {
                    continue;
                };
                match &mut grads[j] {
                    Some(acc) => acc.add_scaled(&ig, 1.0),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let mut leaf_grads = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Leaf { .. } = node.kind {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaf_grads.push((i, g));
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves: leaf_grads,
        })
    }
}

/// Gradient of a loss with respect to each leaf of a record.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if `v` is not a leaf of the record.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves
            .binary_search_by_key(&v.index, |(i, _)| *i)
            .ok()
            .map(|pos| &self.leaves[pos].1)
    }

    /// Like [`Gradients::get`], panicking on a non-leaf.
    pub fn of(&self, v: Var) -> &Tensor {
        self.get(v).expect("gradient requested for a non-leaf variable")
    }
}
