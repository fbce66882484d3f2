use std::collections::HashMap;

use super::{Activation, BinaryOp, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of a scalar with respect to every parameter leaf of a record.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id())
    }

    /// Gradient for `v`, or zeros of its shape when the output does not depend on it.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    /// Moves the gradient for `v` out, or zeros when absent.
    pub fn take(&mut self, v: &Var<'_>) -> Tensor {
        self.grads
            .remove(&v.id())
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the adjoint computation is itself recorded, so the
    /// returned variables can be differentiated again. Without it they are
    /// constants. The record stays usable either way.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>> {
        let ids: Vec<usize> = wrt.iter().map(Var::id).collect();
        let grads = self.sweep(output, &ids, create_graph)?;
        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(&w.id())
                    .copied()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(&w.shape())))
            })
            .collect())
    }

    /// Final reverse pass: gradients for every parameter leaf. Consumes the
    /// record; a second call fails.
    pub fn backward<'g>(&'g self, output: Var<'g>) -> Result<Gradients> {
        self.mark_consumed()?;
        let leaves: Vec<usize> = {
            let nodes = self.nodes.borrow();
            (0..=output.id().min(nodes.len() - 1))
                .filter(|&i| nodes[i].op.is_none() && nodes[i].requires_grad)
                .collect()
        };
        let grads = self.sweep(output, &leaves, false)?;
        Ok(Gradients {
            grads: leaves
                .into_iter()
                .filter_map(|id| grads.get(&id).map(|g| (id, (*g.value()).clone())))
                .collect(),
        })
    }

    fn sweep<'g>(
        &'g self,
        output: Var<'g>,
        wrt: &[usize],
        create_graph: bool,
    ) -> Result<HashMap<usize, Var<'g>>> {
        let out_value = output.value();
        if out_value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, got shape {:?}",
                out_value.shape()
            )));
        }
        let hi = output.id();
        let Some(&lo) = wrt.iter().min() else {
            return Ok(HashMap::new());
        };
        if lo > hi {
            return Ok(HashMap::new());
        }

        // Entries on some path from a `wrt` node to the output.
        let mut relevant = vec![false; hi - lo + 1];
        for &w in wrt {
            if w <= hi {
                relevant[w - lo] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in lo..=hi {
                if relevant[id - lo] {
                    continue;
                }
                if let Some(op) = &nodes[id].op {
                    relevant[id - lo] = op
                        .inputs()
                        .iter()
                        .any(|&i| i >= lo && relevant[i - lo]);
                }
            }
        }

        let previous = self.set_recording(create_graph);
        let result = (|| {
            let mut grads: Vec<Option<Var<'g>>> = vec![None; hi - lo + 1];
            grads[hi - lo] = Some(self.constant(Tensor::ones(out_value.shape())));
            for id in (lo..=hi).rev() {
                if !relevant[id - lo] {
                    continue;
                }
                let Some(g) = grads[id - lo] else { continue };
                let Some(op) = self.node_op(id) else { continue };
                let wants = |i: usize| i >= lo && relevant[i - lo];
                for (input, contribution) in vjp(self, id, &op, g, wants)? {
                    let slot = &mut grads[input - lo];
                    *slot = Some(match *slot {
                        Some(acc) => acc.add(contribution)?,
                        None => contribution,
                    });
                }
            }
            Ok(wrt
                .iter()
                .filter(|&&w| w >= lo && w <= hi)
                .filter_map(|&w| grads[w - lo].map(|g| (w, g)))
                .collect())
        })();
        self.set_recording(previous);
        result
    }
}

/// Sums `g` down to `shape` when the forward op broadcast a scalar operand.
fn reduce_to<'g>(g: Var<'g>, shape: &[usize]) -> Result<Var<'g>> {
    if g.shape() == shape {
        Ok(g)
    } else {
        g.sum()?.reshape(shape)
    }
}

fn mask<'g>(graph: &'g Graph, a: &Tensor, b: &Tensor, pick: impl Fn(f64, f64) -> bool) -> Var<'g> {
    let scalar_b = a.shape() != b.shape();
    let m = Tensor::from_fn(a.shape(), |i| {
        let bv = if scalar_b { b.data()[0] } else { b.data()[i] };
        if pick(a.data()[i], bv) {
            1.0
        } else {
            0.0
        }
    });
    graph.constant(m)
}

/// Vector-Jacobian products of one entry, for the inputs selected by `wants`.
fn vjp<'g>(
    graph: &'g Graph,
    id: usize,
    op: &Op,
    g: Var<'g>,
    wants: impl Fn(usize) -> bool,
) -> Result<Vec<(usize, Var<'g>)>> {
    let out = graph.var(id);
    let mut acc = Vec::with_capacity(2);
    match op {
        &Op::Binary(kind, a, b) => {
            let (av, bv) = (graph.var(a), graph.var(b));
            let b_shape = bv.shape();
            match kind {
                BinaryOp::Add => {
                    if wants(a) {
                        acc.push((a, g));
                    }
                    if wants(b) {
                        acc.push((b, reduce_to(g, &b_shape)?));
                    }
                }
                BinaryOp::Sub => {
                    if wants(a) {
                        acc.push((a, g));
                    }
                    if wants(b) {
                        acc.push((b, reduce_to(g.neg()?, &b_shape)?));
                    }
                }
                BinaryOp::Mul => {
                    if wants(a) {
                        acc.push((a, g.mul(bv)?));
                    }
                    if wants(b) {
                        acc.push((b, reduce_to(g.mul(av)?, &b_shape)?));
                    }
                }
                BinaryOp::Div => {
                    if wants(a) {
                        acc.push((a, g.div(bv)?));
                    }
                    if wants(b) {
                        let d = g.mul(out)?.div(bv)?.neg()?;
                        acc.push((b, reduce_to(d, &b_shape)?));
                    }
                }
                BinaryOp::Pow => {
                    if wants(a) {
                        let d = av.pow(bv.add_scalar(-1.0)?)?.mul(bv)?;
                        acc.push((a, g.mul(d)?));
                    }
                    if wants(b) {
                        let d = g.mul(out)?.mul(av.ln()?)?;
                        acc.push((b, reduce_to(d, &b_shape)?));
                    }
                }
                BinaryOp::Min | BinaryOp::Max => {
                    let (x, y) = (av.value(), bv.value());
                    let ma = if kind == BinaryOp::Min {
                        mask(graph, &x, &y, |p, q| p <= q)
                    } else {
                        mask(graph, &x, &y, |p, q| p >= q)
                    };
                    if wants(a) {
                        acc.push((a, g.mul(ma)?));
                    }
                    if wants(b) {
                        let mb = ma.neg()?.add_scalar(1.0)?;
                        acc.push((b, reduce_to(g.mul(mb)?, &b_shape)?));
                    }
                }
            }
        }
        &Op::Unary(kind, a) => {
            if wants(a) {
                let av = graph.var(a);
                let d = match kind {
                    Activation::Relu => {
                        let m = av.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        g.mul(graph.constant(m))?
                    }
                    Activation::LeakyRelu(s) => {
                        let m = av.value().map(|v| if v > 0.0 { 1.0 } else { s });
                        g.mul(graph.constant(m))?
                    }
                    Activation::Sigmoid => g.mul(out)?.mul(out.neg()?.add_scalar(1.0)?)?,
                    Activation::Tanh => g.mul(out.square()?.neg()?.add_scalar(1.0)?)?,
                    Activation::Exp => g.mul(out)?,
                    Activation::Log => g.div(av)?,
                    Activation::Softplus => g.mul(av.sigmoid()?)?,
                };
                acc.push((a, d));
            }
        }
        &Op::MatMul(a, b) => {
            if wants(a) {
                acc.push((a, g.matmul(graph.var(b).transpose()?)?));
            }
            if wants(b) {
                acc.push((b, graph.var(a).transpose()?.matmul(g)?));
            }
        }
        &Op::Transpose(a) => {
            if wants(a) {
                acc.push((a, g.transpose()?));
            }
        }
        &Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } => {
            let (xv, kv) = (graph.var(input), graph.var(kernel));
            if wants(input) {
                let s = xv.shape();
                acc.push((input, g.conv2d_transpose(kv, stride, pad, (s[1], s[2]))?));
            }
            if wants(kernel) {
                let ks = kv.shape();
                acc.push((kernel, xv.conv2d_kernel_grad(g, stride, pad, (ks[2], ks[3]))?));
            }
        }
        &Op::Conv2dTranspose {
            grad,
            kernel,
            stride,
            pad,
            ..
        } => {
            let (gy, kv) = (graph.var(grad), graph.var(kernel));
            if wants(grad) {
                acc.push((grad, g.conv2d(kv, stride, pad)?));
            }
            if wants(kernel) {
                let ks = kv.shape();
                acc.push((kernel, g.conv2d_kernel_grad(gy, stride, pad, (ks[2], ks[3]))?));
            }
        }
        &Op::Conv2dKernelGrad {
            input,
            grad,
            stride,
            pad,
            ..
        } => {
            let (xv, gy) = (graph.var(input), graph.var(grad));
            if wants(input) {
                let s = xv.shape();
                acc.push((input, gy.conv2d_transpose(g, stride, pad, (s[1], s[2]))?));
            }
            if wants(grad) {
                acc.push((grad, xv.conv2d(g, stride, pad)?));
            }
        }
        Op::Sum { input, axes } => {
            if wants(*input) {
                let s = graph.var(*input).shape();
                acc.push((*input, g.broadcast_axes(axes, &s)?));
            }
        }
        Op::Broadcast { input, axes } => {
            if wants(*input) {
                let s = graph.var(*input).shape();
                acc.push((*input, g.sum_axes(axes)?.reshape(&s)?));
            }
        }
        &Op::Reshape(a) => {
            if wants(a) {
                acc.push((a, g.reshape(&graph.var(a).shape())?));
            }
        }
        &Op::Concat(a, b) => {
            let ca = graph.var(a).shape()[0];
            let cb = graph.var(b).shape()[0];
            if wants(a) {
                acc.push((a, g.slice_channels(0, ca)?));
            }
            if wants(b) {
                acc.push((b, g.slice_channels(ca, cb)?));
            }
        }
        &Op::Slice { input, start } => {
            if wants(input) {
                let full = graph.var(input).shape();
                let len = g.shape()[0];
                let mut d = g;
                if start > 0 {
                    let mut s = full.clone();
                    s[0] = start;
                    d = graph.constant(Tensor::zeros(&s)).concat_channels(d)?;
                }
                let rest = full[0] - start - len;
                if rest > 0 {
                    let mut s = full.clone();
                    s[0] = rest;
                    d = d.concat_channels(graph.constant(Tensor::zeros(&s)))?;
                }
                acc.push((input, d));
            }
        }
        &Op::Softmax { input, axis } => {
            if wants(input) {
                let shape = out.shape();
                let gy = g.mul(out)?;
                let s = gy.sum_axes(&[axis])?.broadcast_axes(&[axis], &shape)?;
                acc.push((input, gy.sub(out.mul(s)?)?));
            }
        }
        &Op::Upsample2(a) => {
            if wants(a) {
                acc.push((a, g.sumpool2()?));
            }
        }
        &Op::SumPool2(a) => {
            if wants(a) {
                acc.push((a, g.upsample2()?));
            }
        }
        Op::Gather { input, idx } => {
            if wants(*input) {
                let s = graph.var(*input).shape();
                acc.push((*input, g.scatter(idx.clone(), &s)?));
            }
        }
        Op::Scatter { input, idx } => {
            if wants(*input) {
                let s = graph.var(*input).shape();
                acc.push((*input, g.gather(idx.clone(), &s)?));
            }
        }
    }
    Ok(acc)
}
