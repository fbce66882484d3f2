//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a single-threaded computation record. Every operation on a
//! [`Var`] evaluates eagerly and appends one entry to the record; operands
//! always precede results, so a reverse sweep over entry ids is a valid
//! topological order.
//!
//! Adjoints are themselves expressed as recorded operations. [`Graph::grad`]
//! with `create_graph = true` therefore yields gradients that can be
//! differentiated again, which the Hamiltonian flow needs: its leapfrog steps
//! use `∇z U` inside a quantity that is later differentiated with respect to
//! the network parameters.

mod backward;
mod check;

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

pub use backward::Gradients;
pub use check::{finite_diff_check, finite_diff_check_many};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor};

static DEFAULT_STRICT: AtomicBool = AtomicBool::new(true);

/// Sets the strict-finite default for graphs created afterwards with [`Graph::new`].
pub fn set_default_strict_finite(on: bool) {
    DEFAULT_STRICT.store(on, Ordering::Relaxed);
}

pub fn default_strict_finite() -> bool {
    DEFAULT_STRICT.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Binary(BinaryOp, usize, usize),
    Unary(Activation, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Conv2dTranspose {
        grad: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Conv2dKernelGrad {
        input: usize,
        grad: usize,
        stride: usize,
        pad: usize,
    },
    Sum {
        input: usize,
        axes: Vec<usize>,
    },
    Broadcast {
        input: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    Concat(usize, usize),
    Slice {
        input: usize,
        start: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Upsample2(usize),
    SumPool2(usize),
    Gather {
        input: usize,
        idx: Arc<Vec<usize>>,
    },
    Scatter {
        input: usize,
        idx: Arc<Vec<usize>>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::Concat(a, b) => vec![a, b],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::Conv2dTranspose { grad, kernel, .. } => vec![grad, kernel],
            Op::Conv2dKernelGrad { input, grad, .. } => vec![input, grad],
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Upsample2(a)
            | Op::SumPool2(a) => vec![a],
            Op::Sum { input, .. }
            | Op::Broadcast { input, .. }
            | Op::Slice { input, .. }
            | Op::Softmax { input, .. }
            | Op::Gather { input, .. }
            | Op::Scatter { input, .. } => vec![input],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    /// `None` for leaves and for values that do not depend on any parameter.
    pub(crate) op: Option<Op>,
    pub(crate) requires_grad: bool,
}

/// A computation record.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    consumed: Cell<bool>,
    strict: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_strict(default_strict_finite())
    }

    /// A record whose operations reject NaN/Inf results when `strict` is on.
    pub fn with_strict(strict: bool) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            consumed: Cell::new(false),
            strict,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// Shares storage with an existing tensor.
    pub fn param_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Stops gradient flow: a constant carrying `v`'s current value.
    pub fn detach<'g>(&'g self, v: Var<'g>) -> Var<'g> {
        self.leaf(v.value(), false)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn node_value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn node_requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn node_op(&self, id: usize) -> Option<Op> {
        self.nodes.borrow()[id].op.clone()
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    pub(crate) fn set_recording(&self, on: bool) -> bool {
        self.recording.replace(on)
    }

    pub(crate) fn mark_consumed(&self) -> Result<()> {
        if self.consumed.replace(true) {
            return Err(Error::Graph(
                "backward already ran on this computation record".into(),
            ));
        }
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op, what: &str) -> Result<Var<'_>> {
        if self.strict && !value.all_finite() {
            return Err(Error::NonFinite(format!("{what} produced NaN or Inf")));
        }
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }
}

/// Handle to a value in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

fn same_graph(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if !std::ptr::eq(a.graph, b.graph) {
        return Err(Error::Graph("operands belong to different records".into()));
    }
    Ok(())
}

fn binary_apply(kind: BinaryOp, a: f64, b: f64) -> f64 {
    match kind {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Pow => a.powf(b),
        BinaryOp::Min => a.min(b),
        BinaryOp::Max => a.max(b),
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.node_requires_grad(self.id)
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Elementwise binary operation. `other` must have the same shape or hold
    /// a single element, which is then applied to every entry.
    pub fn elementwise(self, kind: BinaryOp, other: Var<'g>) -> Result<Var<'g>> {
        same_graph(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| binary_apply(kind, x, y))
                .collect()
        } else if b.is_scalar() {
            let y = b.data()[0];
            a.data().iter().map(|&x| binary_apply(kind, x, y)).collect()
        } else {
            return Err(shape_err(format!(
                "{kind:?}: operand shapes {:?} and {:?} differ and the second is not a scalar",
                a.shape(),
                b.shape()
            )));
        };
        if kind == BinaryOp::Div && self.graph.strict && b.data().contains(&0.0) {
            return Err(Error::NonFinite("division by exact zero".into()));
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.graph
            .push(out, Op::Binary(kind, self.id, other.id), &format!("{kind:?}"))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(BinaryOp::Div, other)
    }

    pub fn pow(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(BinaryOp::Pow, other)
    }

    pub fn minimum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(BinaryOp::Min, other)
    }

    pub fn maximum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(BinaryOp::Max, other)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.add(self.graph.scalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'g>> {
        self.mul(self.graph.scalar(c))
    }

    pub fn pow_scalar(self, c: f64) -> Result<Var<'g>> {
        self.pow(self.graph.scalar(c))
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.mul_scalar(-1.0)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'g>> {
        let x = self.value();
        if kind == Activation::Log && x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        let out = match kind {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::LeakyRelu(s) => x.map(|v| if v > 0.0 { v } else { s * v }),
            Activation::Sigmoid => x.map(stable_sigmoid),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Exp => x.map(f64::exp),
            Activation::Log => x.map(f64::ln),
            Activation::Softplus => x.map(stable_softplus),
        };
        self.graph
            .push(out, Op::Unary(kind, self.id), &format!("{kind:?}"))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.activation(Activation::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'g>> {
        self.activation(Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.activation(Activation::Tanh)
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.activation(Activation::Exp)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.activation(Activation::Log)
    }

    pub fn softplus(self) -> Result<Var<'g>> {
        self.activation(Activation::Softplus)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        same_graph(&self, &other)?;
        let out = tensor::matmul(&self.value(), &other.value())?;
        self.graph.push(out, Op::MatMul(self.id, other.id), "matmul")
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let out = tensor::transpose(&self.value())?;
        self.graph.push(out, Op::Transpose(self.id), "transpose")
    }

    /// Cross-correlation of `[Cin,H,W]` with kernels `[Cout,Cin,kh,kw]`.
    pub fn conv2d(self, kernel: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        same_graph(&self, &kernel)?;
        let out = tensor::conv2d(&self.value(), &kernel.value(), stride, pad)?;
        self.graph.push(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    /// Input-adjoint of [`Var::conv2d`]; `self` is shaped like the convolution output.
    pub fn conv2d_transpose(
        self,
        kernel: Var<'g>,
        stride: usize,
        pad: usize,
        input_hw: (usize, usize),
    ) -> Result<Var<'g>> {
        same_graph(&self, &kernel)?;
        let out =
            tensor::conv2d_transpose(&self.value(), &kernel.value(), stride, pad, input_hw)?;
        self.graph.push(
            out,
            Op::Conv2dTranspose {
                grad: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
            "conv2d_transpose",
        )
    }

    /// Kernel-adjoint of [`Var::conv2d`]: `self` is the convolution input and
    /// `grad` is shaped like the convolution output.
    pub fn conv2d_kernel_grad(
        self,
        grad: Var<'g>,
        stride: usize,
        pad: usize,
        kernel_hw: (usize, usize),
    ) -> Result<Var<'g>> {
        same_graph(&self, &grad)?;
        let out =
            tensor::conv2d_kernel_grad(&self.value(), &grad.value(), stride, pad, kernel_hw)?;
        self.graph.push(
            out,
            Op::Conv2dKernelGrad {
                input: self.id,
                grad: grad.id,
                stride,
                pad,
            },
            "conv2d_kernel_grad",
        )
    }

    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'g>> {
        let out = tensor::sum_axes(&self.value(), axes)?;
        let axes = tensor::check_axes(&self.shape(), axes)?;
        self.graph.push(
            out,
            Op::Sum {
                input: self.id,
                axes,
            },
            "sum",
        )
    }

    /// Sum of every element, as a rank-0 variable.
    pub fn sum(self) -> Result<Var<'g>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum_axes(&axes)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        self.sum_axes(axes)?.mul_scalar(1.0 / count as f64)
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().numel();
        self.sum()?.mul_scalar(1.0 / n as f64)
    }

    pub fn reduce(self, kind: Reduction, axes: &[usize]) -> Result<Var<'g>> {
        match kind {
            Reduction::Sum => self.sum_axes(axes),
            Reduction::Mean => self.mean_axes(axes),
        }
    }

    /// Replicates `self` along `axes` so that the result has `shape`.
    pub fn broadcast_axes(self, axes: &[usize], shape: &[usize]) -> Result<Var<'g>> {
        let out = tensor::broadcast_axes(&self.value(), axes, shape)?;
        let axes = tensor::check_axes(shape, axes)?;
        self.graph.push(
            out,
            Op::Broadcast {
                input: self.id,
                axes,
            },
            "broadcast",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        self.graph.push(out, Op::Reshape(self.id), "reshape")
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat_channels(self, other: Var<'g>) -> Result<Var<'g>> {
        same_graph(&self, &other)?;
        let out = tensor::concat_axis0(&self.value(), &other.value())?;
        self.graph.push(out, Op::Concat(self.id, other.id), "concat")
    }

    /// Leading-axis entries `start..start+len`.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'g>> {
        let out = tensor::slice_axis0(&self.value(), start, len)?;
        self.graph.push(
            out,
            Op::Slice {
                input: self.id,
                start,
            },
            "slice",
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let out = tensor::softmax(&self.value(), axis)?;
        self.graph.push(
            out,
            Op::Softmax {
                input: self.id,
                axis,
            },
            "softmax",
        )
    }

    pub fn upsample2(self) -> Result<Var<'g>> {
        let out = tensor::upsample2(&self.value())?;
        self.graph.push(out, Op::Upsample2(self.id), "upsample2")
    }

    pub fn sumpool2(self) -> Result<Var<'g>> {
        let out = tensor::sumpool2(&self.value())?;
        self.graph.push(out, Op::SumPool2(self.id), "sumpool2")
    }

    pub fn maxpool2(self) -> Result<Var<'g>> {
        let (idx, shape) = tensor::maxpool2_indices(&self.value())?;
        self.gather(Arc::new(idx), &shape)
    }

    pub(crate) fn gather(self, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let out = tensor::gather(&self.value(), &idx, shape)?;
        self.graph.push(
            out,
            Op::Gather {
                input: self.id,
                idx,
            },
            "gather",
        )
    }

    pub(crate) fn scatter(self, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let out = tensor::scatter_add(&self.value(), &idx, shape)?;
        self.graph.push(
            out,
            Op::Scatter {
                input: self.id,
                idx,
            },
            "scatter",
        )
    }
}

/// Elementwise binary operation with a constant scalar right-hand side.
pub fn elementwise_scalar<'g>(kind: BinaryOp, a: Var<'g>, b: f64) -> Result<Var<'g>> {
    a.elementwise(kind, a.graph().scalar(b))
}
