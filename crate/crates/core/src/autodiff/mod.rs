//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] evaluates eagerly: every operation computes its value when it
//! is recorded, and the node list doubles as the tape. Node indices are a
//! topological order, so [`Graph::backward`] walks them in reverse once.

mod kernels;
mod ops;

pub use kernels::{bilinear_axis, conv2d_output_dim, rotation_taps, RotationTap};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<bool>,
        probs: Vec<T>,
    },
    SumAll(Var),
    SumAxis0(Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    DivCol(Var, Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    RotateKernels {
        w: Var,
        theta: Var,
    },
}

impl<T> Op<T> {
    /// Stable operation name, used in error messages, fault injection and
    /// gradient reports.
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Softmax(..) => "softmax_lastdim",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumAll(..) => "sum",
            Op::SumAxis0(..) => "sum_axis0",
            Op::L2NormRows { .. } => "l2_normalize_rows",
            Op::DivCol(..) => "div_col",
            Op::GatherRows { .. } => "gather_rows",
            Op::RotateKernels { .. } => "rotate_kernels",
        }
    }
}

/// Names of every differentiable primitive recorded by [`Graph`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "relu",
    "tanh",
    "conv1d",
    "conv2d",
    "instance_norm",
    "softmax_lastdim",
    "concat",
    "slice",
    "reshape",
    "upsample_bilinear",
    "global_avg_pool",
    "dropout",
    "cross_entropy",
    "sum",
    "sum_axis0",
    "l2_normalize_rows",
    "div_col",
    "gather_rows",
    "rotate_kernels",
];

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<T>>,
}

/// Computation graph and gradient tape.
#[derive(Debug)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<String>,
    /// Instance-normalization epsilon used by [`Graph::instance_norm`].
    pub norm_eps: T,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
            norm_eps: T::lit(DEFAULT_NORM_EPS),
        }
    }

    /// Corrupts the backward rule of the named operation by scaling every
    /// input gradient it emits by 1.5. Used to prove the gradient checker
    /// catches a wrong backward pass.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves marked `requires_grad` receive a gradient on
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass for a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Hash of the branch taken at every non-differentiable point of the
    /// recorded computation: the sign of each ReLU input and the bilinear
    /// cells sampled by each kernel rotation. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::RotateKernels { w, theta } => {
                    let k = self.nodes[w.0].value.shape()[3];
                    for &t in self.nodes[theta.0].value.data() {
                        for tap in rotation_taps(k, t) {
                            (tap.dst, tap.src).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-leaf result after checking it is finite.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let name = op.name();
        value.check_finite(name)?;
        let requires_grad = self.inputs_require_grad(&op);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn inputs_require_grad(&self, op: &Op<T>) -> bool {
        let mut any = false;
        for_each_input(op, |v| any |= self.nodes[v.0].requires_grad);
        any
    }

    /// Runs reverse-mode differentiation from a scalar loss.
    ///
    /// Every leaf created with `requires_grad` receives a gradient (zeros
    /// when the loss does not depend on it). The tape is consumed: a second
    /// call returns [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::EmptyTape);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            let mut contributions = self.backprop(i, &gy)?;
            if let Some(fault) = &self.fault {
                if self.nodes[i].op.name() == fault {
                    for (_, g) in contributions.iter_mut() {
                        *g = g.map(|v| v * T::lit(1.5));
                    }
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                g.check_finite("backward")?;
                node.grad = Some(g);
            }
        }
        Ok(())
    }
}

fn for_each_input<T>(op: &Op<T>, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::DivCol(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::AddConst(x)
        | Op::Relu(x)
        | Op::Tanh(x)
        | Op::Softmax(x)
        | Op::Reshape(x)
        | Op::GlobalAvgPool(x)
        | Op::SumAll(x)
        | Op::SumAxis0(x) => f(*x),
        Op::Conv1d { x, w, b } => {
            f(*x);
            f(*w);
            f(*b);
        }
        Op::Conv2d { x, w, b, .. } => {
            f(*x);
            f(*w);
            if let Some(b) = b {
                f(*b);
            }
        }
        Op::InstanceNorm { x, .. }
        | Op::Slice { x, .. }
        | Op::Upsample { x, .. }
        | Op::Dropout { x, .. }
        | Op::L2NormRows { x, .. } => f(*x),
        Op::Concat { parts, .. } => parts.iter().copied().for_each(f),
        Op::CrossEntropy { logits, .. } => f(*logits),
        Op::GatherRows { table, .. } => f(*table),
        Op::RotateKernels { w, theta } => {
            f(*w);
            f(*theta);
        }
    }
}
