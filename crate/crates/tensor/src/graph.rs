//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants, differentiable variables, or parameters bound from a
//! [`ParamStore`]; every other node records the operation that produced it.

use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, transposed_conv2d, transposed_conv2d_backward, ConvSpec};
use crate::error::{expect_dim, Result, TensorError};
use crate::ops::{self, NormStats};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Elu(f32),
    Tanh,
    Sigmoid,
    Abs,
    Square,
    /// `ln(clamp(x, lo, hi))`; the gradient vanishes where clamping is active.
    LogClamped { lo: f32, hi: f32 },
    Scale(f32),
    AddScalar(f32),
}

impl Unary {
    fn forward(self, x: f32) -> f32 {
        match self {
            Unary::Elu(alpha) => ops::elu_scalar(x, alpha),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => ops::sigmoid_scalar(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::LogClamped { lo, hi } => x.clamp(lo, hi).ln(),
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
        }
    }

    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Elu(alpha) => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::LogClamped { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param {
        store: u64,
        id: ParamId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    TransposedConv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
        output_padding: usize,
    },
    Resize {
        input: NodeId,
        factor: usize,
    },
    InstanceNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats,
    },
    Unary {
        input: NodeId,
        kind: Unary,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f32>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: NodeId) -> Shape {
        self.nodes[node.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Variable | Op::Param { .. } => true,
            Op::Conv2d { input, weight, bias, .. }
            | Op::TransposedConv2d { input, weight, bias, .. } => {
                self.needs(*input) || self.needs(*weight) || bias.is_some_and(|b| self.needs(b))
            }
            Op::InstanceNorm { input, gamma, beta, .. } => {
                self.needs(*input) || self.needs(*gamma) || self.needs(*beta)
            }
            Op::Resize { input, .. }
            | Op::Unary { input, .. }
            | Op::Dropout { input, .. }
            | Op::Sum(input)
            | Op::Mean(input) => self.needs(*input),
            Op::Concat { inputs } => inputs.iter().any(|&i| self.needs(i)),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, node: NodeId) -> bool {
        self.nodes[node.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf whose gradient is reported by [`Graph::gradients`] but not stored anywhere.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Variable)
    }

    /// Leaf bound to a parameter; [`Graph::backward`] accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        self.push(
            value,
            Op::Param {
                store: store.uid(),
                id,
            },
        )
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let value = conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn transposed_conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
        output_padding: usize,
    ) -> Result<NodeId> {
        let value = transposed_conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
            output_padding,
        )?;
        Ok(self.push(
            value,
            Op::TransposedConv2d {
                input,
                weight,
                bias,
                spec,
                output_padding,
            },
        ))
    }

    pub fn nearest_resize(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let value = ops::nearest_resize(self.value(input), factor)?;
        Ok(self.push(value, Op::Resize { input, factor }))
    }

    pub fn instance_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<NodeId> {
        let (value, stats) =
            ops::instance_norm(self.value(input), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            },
        ))
    }

    fn unary(&mut self, input: NodeId, kind: Unary) -> NodeId {
        let value = self.value(input).map(|v| kind.forward(v));
        self.push(value, Op::Unary { input, kind })
    }

    pub fn elu(&mut self, input: NodeId, alpha: f32) -> NodeId {
        self.unary(input, Unary::Elu(alpha))
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Sigmoid)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Abs)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Square)
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        self.unary(input, Unary::Scale(factor))
    }

    pub fn add_scalar(&mut self, input: NodeId, offset: f32) -> NodeId {
        self.unary(input, Unary::AddScalar(offset))
    }

    /// `ln(clamp(x, lo, hi))` plus the number of entries that were clamped.
    pub fn log_clamped(&mut self, input: NodeId, lo: f32, hi: f32) -> (NodeId, usize) {
        let clamped = self
            .value(input)
            .data()
            .iter()
            .filter(|&&v| v < lo || v > hi)
            .count();
        (self.unary(input, Unary::LogClamped { lo, hi }), clamped)
    }

    /// Inverted dropout. In evaluation mode, or with `rate == 0`, returns `input` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        rate: f32,
        rng: &mut R,
        training: bool,
    ) -> Result<NodeId> {
        let len = if training { self.value(input).numel() } else { 0 };
        let mask = ops::dropout_mask(len, rate, rng)?;
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = ops::concat_channels(&tensors)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a).0, self.shape(b).0);
        for (i, dim) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
            expect_dim(op, dim, sa[i], sb[i])?;
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: NodeId, b: NodeId, f: fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).sum() as f32);
        self.push(value, Op::Sum(input))
    }

    /// Mean of all entries, accumulated in `f64`.
    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let value = Tensor::scalar((x.sum() / x.numel() as f64) as f32);
        self.push(value, Op::Mean(input))
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every node on a
    /// path from a variable or parameter leaf to `loss`.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape != Shape::SCALAR {
            return Err(TensorError::NonScalarLoss(loss_shape.0));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::gradients`] and accumulates parameter gradients into
    /// `store`. Parameters bound from other stores are left untouched.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param { store: uid, id } = node.op {
                if uid == store.uid() {
                    if let Some(g) = grads.grads[idx].as_ref() {
                        store.accumulate_grad(id, g);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |grads: &mut [Option<Tensor>], target: NodeId, g: Tensor| {
            if !self.needs(target) {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Constant | Op::Variable | Op::Param { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (dx, dw, db) = conv2d_backward(self.value(*input), self.value(*weight), dy, spec);
                send(grads, *input, dx);
                send(grads, *weight, dw);
                if let Some(b) = bias {
                    let shape = self.shape(*b);
                    send(grads, *b, db.reshape(shape).expect("bias length checked"));
                }
            }
            Op::TransposedConv2d {
                input,
                weight,
                bias,
                spec,
                output_padding,
            } => {
                let (dx, dw, db) = transposed_conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    dy,
                    spec,
                    *output_padding,
                );
                send(grads, *input, dx);
                send(grads, *weight, dw);
                if let Some(b) = bias {
                    let shape = self.shape(*b);
                    send(grads, *b, db.reshape(shape).expect("bias length checked"));
                }
            }
            Op::Resize { input, factor } => {
                let f = *factor;
                let mut dx = Tensor::zeros(self.shape(*input));
                let [n, c, h, w] = dx.dims();
                let ow = w * f;
                for plane in 0..n * c {
                    let src = &dy.data()[plane * h * f * ow..(plane + 1) * h * f * ow];
                    let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for (y, row) in src.chunks(ow).enumerate() {
                        let drow = &mut dst[(y / f) * w..(y / f + 1) * w];
                        for (x, &v) in row.iter().enumerate() {
                            drow[x / f] += v;
                        }
                    }
                }
                send(grads, *input, dx);
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                stats,
            } => {
                let [n, c, h, w] = dy.dims();
                let plane = h * w;
                let gvals = self.value(*gamma);
                let mut dx = Tensor::zeros(dy.shape());
                let mut dgamma = Tensor::zeros(self.shape(*gamma));
                let mut dbeta = Tensor::zeros(self.shape(*beta));
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let g = &dy.data()[off..off + plane];
                        let xh = &stats.normalized.data()[off..off + plane];
                        let sum_g: f64 = g.iter().map(|&v| v as f64).sum();
                        let sum_gx: f64 = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
                        dgamma.data_mut()[ch] += sum_gx as f32;
                        dbeta.data_mut()[ch] += sum_g as f32;
                        let scale = gvals.data()[ch] as f64 * stats.inv_std[b * c + ch] as f64
                            / plane as f64;
                        let np = plane as f64;
                        for ((dst, &gi), &xi) in dx.data_mut()[off..off + plane]
                            .iter_mut()
                            .zip(g)
                            .zip(xh)
                        {
                            *dst = (scale * (np * gi as f64 - sum_g - xi as f64 * sum_gx)) as f32;
                        }
                    }
                }
                send(grads, *input, dx);
                send(grads, *gamma, dgamma);
                send(grads, *beta, dbeta);
            }
            Op::Unary { input, kind } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(dy.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                send(grads, *input, Tensor::from_vec(x.shape(), data).expect("same shape"));
            }
            Op::Dropout { input, mask } => {
                let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                send(grads, *input, Tensor::from_vec(dy.shape(), data).expect("same shape"));
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for &i in inputs {
                    let c = self.shape(i).channels();
                    send(grads, i, dy.channel_slice(start, c).expect("concat extents"));
                    start += c;
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, dy.clone());
                send(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(grads, *a, dy.clone());
                send(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = dy.data().iter().zip(vb.data()).map(|(g, v)| g * v).collect();
                let db = dy.data().iter().zip(va.data()).map(|(g, v)| g * v).collect();
                send(grads, *a, Tensor::from_vec(va.shape(), da).expect("same shape"));
                send(grads, *b, Tensor::from_vec(vb.shape(), db).expect("same shape"));
            }
            Op::Sum(input) => {
                send(grads, *input, Tensor::full(self.shape(*input), dy.item()));
            }
            Op::Mean(input) => {
                let shape = self.shape(*input);
                send(grads, *input, Tensor::full(shape, dy.item() / shape.numel() as f32));
            }
        }
    }
}
