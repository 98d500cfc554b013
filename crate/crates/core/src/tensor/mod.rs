//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation allocates fresh storage; there are no views. A result
//! records the operation that produced it only when at least one input
//! requires a gradient, so inference-only graphs cost nothing extra.
//!
//! Node ids come from a global monotone counter. Because an op's inputs
//! always exist before its output, sorting the reachable nodes by id in
//! descending order gives a valid reverse topological order for
//! [`Tensor::backward`].

mod backward;
pub mod container;
mod gemm;
pub mod gradcheck;
mod nn_ops;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use container::{NamedTensors, TensorRecord};
pub use gradcheck::{grad_check, relative_error};
pub use nn_ops::{BatchNormStats, Conv2dGeometry};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Number of elements for a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Operation record kept on a non-leaf node. Variants hold their inputs plus
/// whatever the backward pass needs that is not recoverable from the output.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    ClampMin(Tensor, f64),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    SumAll(Tensor),
    SumAxis {
        input: Tensor,
        axis: usize,
    },
    MaxAxis {
        input: Tensor,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Tensor>,
        axis: usize,
    },
    Narrow {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    Reshape(Tensor),
    BroadcastTo(Tensor),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        geom: Conv2dGeometry,
        cols: Vec<f64>,
    },
    BatchNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool2 {
        input: Tensor,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Tensor),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
        }
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Builds the result of an op; the op is recorded only if some input
    /// participates in differentiation.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs_grad: bool) -> Self {
        if inputs_grad {
            Self::from_parts(shape, data, true, Some(op))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    /// Constant leaf tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(shape, data)?.requires_grad(true))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![1.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    /// Fresh leaf with the same values and the given `requires_grad` flag.
    pub fn requires_grad(&self, flag: bool) -> Self {
        Self::from_parts(self.0.shape.clone(), self.0.data.clone(), flag, None)
    }

    /// Leaf copy cut off from the graph. Gradients do not flow through it.
    pub fn detach(&self) -> Self {
        self.requires_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.0.shape),
            )),
        }
    }

    /// Accumulated gradient, populated on leaves by [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn reset_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub(crate) fn set_grad(&self, g: Vec<f64>) {
        *self.0.grad.lock().expect("grad lock poisoned") = Some(g);
    }

    pub(crate) fn has_grad(&self) -> bool {
        self.0.grad.lock().expect("grad lock poisoned").is_some()
    }

    /// True when both tensors refer to the same graph node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("values", &self.0.data);
        }
        if let Some(op) = &self.0.op {
            s.field("op", &op.name());
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}
