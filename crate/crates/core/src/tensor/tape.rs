use std::fmt;

use super::{ops, Shape, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Op identity, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MulBroadcast,
    Add,
    Relu,
    Sigmoid,
    PoolGlobal,
    PoolChannel,
    Dense,
    Conv2d,
    ConcatChannel,
    OneMinus,
    GradientReversal,
    Scale,
    Sum,
    CrossEntropy,
    Triplet,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Leaf,
        OpKind::MulBroadcast,
        OpKind::Add,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::PoolGlobal,
        OpKind::PoolChannel,
        OpKind::Dense,
        OpKind::Conv2d,
        OpKind::ConcatChannel,
        OpKind::OneMinus,
        OpKind::GradientReversal,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::CrossEntropy,
        OpKind::Triplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MulBroadcast => "mul_broadcast",
            OpKind::Add => "add",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::PoolGlobal => "pool_global",
            OpKind::PoolChannel => "pool_channel",
            OpKind::Dense => "dense",
            OpKind::Conv2d => "conv2d",
            OpKind::ConcatChannel => "concat_channel",
            OpKind::OneMinus => "one_minus",
            OpKind::GradientReversal => "gradient_reversal",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Triplet => "triplet",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) enum Op {
    Leaf,
    MulBroadcast { a: Var, b: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    PoolGlobal { x: Var, mode: PoolMode, argmax: Vec<usize> },
    PoolChannel { x: Var, mode: PoolMode, argmax: Vec<usize> },
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, stride: usize },
    ConcatChannel { a: Var, b: Var },
    OneMinus { x: Var },
    GradientReversal { x: Var, scale: f64 },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, live: Vec<bool> },
    Triplet { emb: Var, selections: Vec<ops::TripletSelection>, dist: Vec<f64>, clamped: Vec<bool> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MulBroadcast { .. } => OpKind::MulBroadcast,
            Op::Add { .. } => OpKind::Add,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::PoolGlobal { .. } => OpKind::PoolGlobal,
            Op::PoolChannel { .. } => OpKind::PoolChannel,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConcatChannel { .. } => OpKind::ConcatChannel,
            Op::OneMinus { .. } => OpKind::OneMinus,
            Op::GradientReversal { .. } => OpKind::GradientReversal,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Triplet { .. } => OpKind::Triplet,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MulBroadcast { a, b } | Op::Add { a, b } | Op::ConcatChannel { a, b } => vec![a, b],
            Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::PoolGlobal { x, .. }
            | Op::PoolChannel { x, .. }
            | Op::OneMinus { x }
            | Op::GradientReversal { x, .. }
            | Op::Scale { x, .. }
            | Op::Sum { x } => vec![x],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::Conv2d { x, k, b, .. } => vec![x, k, b],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Triplet { emb, .. } => vec![emb],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations for a single backward pass.
///
/// Ops append nodes in execution order, so every node's inputs precede it.
/// A tape is not `Sync`-shared; build one per thread.
pub struct Tape {
    nodes: Vec<Node>,
    pub(crate) exec: Exec,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape {
            nodes: Vec::new(),
            exec,
            fault: None,
        }
    }

    /// Test hook: doubles every vector-Jacobian product of `kind`.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("variable {} not on this tape", v.0)))
        }
    }

    pub(crate) fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `d loss / d v` to every node that requires a gradient.
    ///
    /// Gradients of a node feeding several ops are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let mut contributions = ops::vjp(self, Var(idx), &node.op, &node.value, &upstream);
            if self.fault == Some(node.op.kind()) {
                for (_, g) in contributions.iter_mut() {
                    g.iter_mut().for_each(|v| *v *= 2.0);
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the node's own gradient readable afterwards
            grads[idx] = Some(upstream);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_vec(node.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not require a gradient or does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient, or zeros shaped like `like` when the loss does not depend on `v`.
    pub fn get_or_zeros(&self, v: Var, like: Shape) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
