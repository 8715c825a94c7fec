//! Define-by-run reverse-mode differentiation tape.
//!
//! A [`Graph`] records every forward op as it executes; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into every node
//! that (transitively) depends on a trainable leaf. Graphs are single-use:
//! one per training step, dropped afterwards.

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sigmoid,
    LeakyRelu(f64),
    Abs,
    SumAll,
    ConcatChannels,
    SliceChannels { start: usize, len: usize },
    Conv2d { stride: usize, padding: usize },
    DeformConv { stride: usize, padding: usize, groups: usize },
    BilinearSample,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    parents: Vec<Var>,
    op: Op,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a tensor as a leaf. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Vec::new(), Op::Leaf)
    }

    /// Leaf that never receives gradients (inputs, grids, targets).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, needs_grad: bool, parents: Vec<Var>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            parents,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn push_dep(&self, value: Tensor<T>, parents: Vec<Var>, op: Op) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push(value, needs, parents, op)
    }

    /// Borrow a node's value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Clone a node's value out of the tape.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if any was recorded.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    fn binary_elementwise(&self, a: Var, b: Var, op: Op) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let tb = &nodes[b.0].value;
            if ta.shape() != tb.shape() {
                return Err(Error::shape(format!(
                    "elementwise operands differ: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data: Vec<T> = match op {
                Op::Add => ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect(),
                Op::Sub => ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect(),
                Op::Mul => ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect(),
                _ => unreachable!("not a binary op"),
            };
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push_dep(value, vec![a, b], op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, Op::Mul)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * T::of(factor));
        self.push_dep(value, vec![a], Op::Scale(factor))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(stable_sigmoid);
        self.push_dep(value, vec![a], Op::Sigmoid)
    }

    pub fn leaky_relu(&self, a: Var, negative_slope: f64) -> Var {
        let s = T::of(negative_slope);
        let value = self.nodes.borrow()[a.0]
            .value
            .map(|v| if v >= T::zero() { v } else { v * s });
        self.push_dep(value, vec![a], Op::LeakyRelu(negative_slope))
    }

    pub fn abs(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.abs());
        self.push_dep(value, vec![a], Op::Abs)
    }

    /// Sum every element into a shape-[1] scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut acc = T::zero();
            for &v in nodes[a.0].value.data() {
                acc = acc + v;
            }
            Tensor::scalar(acc)
        };
        self.push_dep(value, vec![a], Op::SumAll)
    }

    /// Mean of all elements (sum followed by a scale node).
    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared error between two equal-shape tensors, as a scalar node.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    pub fn concat_channels(&self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::arg("concat requires at least one input".to_string()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[inputs[0].0].value;
            let (n, _, h, w) = first.dims4()?;
            let mut total_c = 0usize;
            for v in inputs {
                let (ni, ci, hi, wi) = nodes[v.0].value.dims4()?;
                if (ni, hi, wi) != (n, h, w) {
                    return Err(Error::shape(format!(
                        "concat operand shape {:?} incompatible with {:?}",
                        nodes[v.0].value.shape(),
                        first.shape()
                    )));
                }
                total_c += ci;
            }
            let mut data = Vec::with_capacity(n * total_c * h * w);
            for bi in 0..n {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let c = t.shape()[1];
                    let start = bi * c * h * w;
                    data.extend_from_slice(&t.data()[start..start + c * h * w]);
                }
            }
            Tensor::new(&[n, total_c, h, w], data)?
        };
        Ok(self.push_dep(value, inputs.to_vec(), Op::ConcatChannels))
    }

    /// Split along the channel axis; sizes must sum to the channel count.
    pub fn split_channels(&self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let (n, c, h, w) = self.nodes.borrow()[a.0].value.dims4()?;
        let sum: usize = sizes.iter().sum();
        if sum != c {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} sum to {sum}, tensor has {c} channels"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &len in sizes {
            let value = {
                let nodes = self.nodes.borrow();
                let src = &nodes[a.0].value;
                let mut data = Vec::with_capacity(n * len * h * w);
                for bi in 0..n {
                    let base = (bi * c + start) * h * w;
                    data.extend_from_slice(&src.data()[base..base + len * h * w]);
                }
                Tensor::new(&[n, len, h, w], data)?
            };
            out.push(self.push_dep(value, vec![a], Op::SliceChannels { start, len }));
            start += len;
        }
        Ok(out)
    }

    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            kernels::conv2d_forward(
                &nodes[input.0].value,
                &nodes[weight.0].value,
                &nodes[bias.0].value,
                stride,
                padding,
            )?
        };
        Ok(self.push_dep(value, vec![input, weight, bias], Op::Conv2d { stride, padding }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deform_conv(
        &self,
        input: Var,
        offsets: Var,
        mask: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            kernels::deform_conv_forward(
                &nodes[input.0].value,
                &nodes[offsets.0].value,
                &nodes[mask.0].value,
                &nodes[weight.0].value,
                &nodes[bias.0].value,
                stride,
                padding,
                groups,
            )?
        };
        Ok(self.push_dep(
            value,
            vec![input, offsets, mask, weight, bias],
            Op::DeformConv {
                stride,
                padding,
                groups,
            },
        ))
    }

    pub fn bilinear_sample(&self, feature: Var, coords: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            kernels::bilinear_sample_forward(&nodes[feature.0].value, &nodes[coords.0].value)?
        };
        Ok(self.push_dep(value, vec![feature, coords], Op::BilinearSample))
    }

    /// Reverse pass from a scalar loss. Gradients land on every node with
    /// `needs_grad`, readable through [`Graph::grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if nodes[id].needs_grad {
                nodes[id].grad = Some(g.clone());
            }
            let contribs = backward_step(&nodes, id, &g)?;
            for (p, t) in contribs {
                if nodes[p.0].needs_grad {
                    match grads[p.0].as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a = *a + *b;
                            }
                        }
                        None => grads[p.0] = Some(t),
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn backward_step<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let node = &nodes[id];
    let needs = |v: Var| nodes[v.0].needs_grad;
    let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
    match node.op {
        Op::Leaf => {}
        Op::Add => {
            let (a, b) = (node.parents[0], node.parents[1]);
            if needs(a) {
                out.push((a, g.clone()));
            }
            if needs(b) {
                out.push((b, g.clone()));
            }
        }
        Op::Sub => {
            let (a, b) = (node.parents[0], node.parents[1]);
            if needs(a) {
                out.push((a, g.clone()));
            }
            if needs(b) {
                out.push((b, g.map(|v| -v)));
            }
        }
        Op::Mul => {
            let (a, b) = (node.parents[0], node.parents[1]);
            if needs(a) {
                let vb = &nodes[b.0].value;
                let data = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                out.push((a, Tensor::new(vb.shape(), data)?));
            }
            if needs(b) {
                let va = &nodes[a.0].value;
                let data = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                out.push((b, Tensor::new(va.shape(), data)?));
            }
        }
        Op::Scale(c) => {
            let a = node.parents[0];
            if needs(a) {
                out.push((a, g.map(|v| v * T::of(c))));
            }
        }
        Op::Sigmoid => {
            let a = node.parents[0];
            if needs(a) {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                out.push((a, Tensor::new(y.shape(), data)?));
            }
        }
        Op::LeakyRelu(slope) => {
            let a = node.parents[0];
            if needs(a) {
                let s = T::of(slope);
                let x = &nodes[a.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv >= T::zero() { gv } else { gv * s })
                    .collect();
                out.push((a, Tensor::new(x.shape(), data)?));
            }
        }
        Op::Abs => {
            let a = node.parents[0];
            if needs(a) {
                let x = &nodes[a.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((a, Tensor::new(x.shape(), data)?));
            }
        }
        Op::SumAll => {
            let a = node.parents[0];
            if needs(a) {
                let shape = nodes[a.0].value.shape().to_vec();
                out.push((a, Tensor::full(&shape, g.data()[0])));
            }
        }
        Op::ConcatChannels => {
            let src = &node.value;
            let (n, _c, h, w) = src.dims4()?;
            let mut start = 0usize;
            let total_c = src.shape()[1];
            for &p in &node.parents {
                let cp = nodes[p.0].value.shape()[1];
                if needs(p) {
                    let mut data = Vec::with_capacity(n * cp * h * w);
                    for bi in 0..n {
                        let base = (bi * total_c + start) * h * w;
                        data.extend_from_slice(&g.data()[base..base + cp * h * w]);
                    }
                    out.push((p, Tensor::new(&[n, cp, h, w], data)?));
                }
                start += cp;
            }
        }
        Op::SliceChannels { start, len } => {
            let a = node.parents[0];
            if needs(a) {
                let (n, c, h, w) = nodes[a.0].value.dims4()?;
                let mut data = vec![T::zero(); n * c * h * w];
                for bi in 0..n {
                    let dst = (bi * c + start) * h * w;
                    let src = bi * len * h * w;
                    data[dst..dst + len * h * w].copy_from_slice(&g.data()[src..src + len * h * w]);
                }
                out.push((a, Tensor::new(&[n, c, h, w], data)?));
            }
        }
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (node.parents[0], node.parents[1], node.parents[2]);
            let flags = (needs(x), needs(w), needs(b));
            if flags.0 || flags.1 || flags.2 {
                let grads = kernels::conv2d_backward(
                    g,
                    &nodes[x.0].value,
                    &nodes[w.0].value,
                    stride,
                    padding,
                    flags,
                )?;
                if let Some(t) = grads.input {
                    out.push((x, t));
                }
                if let Some(t) = grads.weight {
                    out.push((w, t));
                }
                if let Some(t) = grads.bias {
                    out.push((b, t));
                }
            }
        }
        Op::DeformConv {
            stride,
            padding,
            groups,
        } => {
            let (x, o, m, w, b) = (
                node.parents[0],
                node.parents[1],
                node.parents[2],
                node.parents[3],
                node.parents[4],
            );
            let flags = (needs(x), needs(o), needs(m), needs(w), needs(b));
            if flags.0 || flags.1 || flags.2 || flags.3 || flags.4 {
                let grads = kernels::deform_conv_backward(
                    g,
                    &nodes[x.0].value,
                    &nodes[o.0].value,
                    &nodes[m.0].value,
                    &nodes[w.0].value,
                    &nodes[b.0].value,
                    stride,
                    padding,
                    groups,
                    flags,
                )?;
                if let Some(t) = grads.input {
                    out.push((x, t));
                }
                if let Some(t) = grads.offsets {
                    out.push((o, t));
                }
                if let Some(t) = grads.mask {
                    out.push((m, t));
                }
                if let Some(t) = grads.weight {
                    out.push((w, t));
                }
                if let Some(t) = grads.bias {
                    out.push((b, t));
                }
            }
        }
        Op::BilinearSample => {
            let (f, c) = (node.parents[0], node.parents[1]);
            let flags = (needs(f), needs(c));
            if flags.0 || flags.1 {
                let (gf, gc) = kernels::bilinear_sample_backward(
                    g,
                    &nodes[f.0].value,
                    &nodes[c.0].value,
                    flags,
                )?;
                if let Some(t) = gf {
                    out.push((f, t));
                }
                if let Some(t) = gc {
                    out.push((c, t));
                }
            }
        }
    }
    Ok(out)
}
