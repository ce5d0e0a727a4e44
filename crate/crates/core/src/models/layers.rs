//! Parameterized building blocks and the forward-pass context.

use polypgan_tensor::{ConvSpec, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Everything a forward pass needs besides the input.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    /// Bind parameters as constants so no gradient flows into them.
    pub frozen: bool,
    /// Enables dropout.
    pub training: bool,
    pub rng: &'a mut dyn RngCore,
    overrides: Vec<(ParamId, NodeId)>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, rng: &'a mut dyn RngCore) -> Self {
        Ctx {
            graph,
            store,
            frozen: false,
            training: true,
            rng,
            overrides: Vec::new(),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn training(mut self, on: bool) -> Self {
        self.training = on;
        self
    }

    /// Uses `node` wherever parameter `id` would be bound.
    pub fn with_override(mut self, id: ParamId, node: NodeId) -> Self {
        self.overrides.push((id, node));
        self
    }

    pub fn bind(&mut self, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.overrides.iter().find(|(p, _)| *p == id) {
            return node;
        }
        if self.frozen {
            self.graph.constant(self.store.value(id).clone())
        } else {
            self.graph.param(self.store, id)
        }
    }
}

/// Shared construction state: the store being filled and the init generator.
pub struct Builder {
    pub store: ParamStore,
    pub rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Builder {
            store: ParamStore::new(),
            rng,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    /// `Some(output_padding)` for a transposed convolution.
    pub transposed: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// Normal init with standard deviation `gain / sqrt(fan_in)`.
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        bias: bool,
        gain: f32,
    ) -> Result<Self> {
        let fan_in = c_in * spec.kernel_h * spec.kernel_w;
        let std = gain / (fan_in as f32).sqrt();
        let w = Tensor::randn([c_out, c_in, spec.kernel_h, spec.kernel_w], std, &mut b.rng);
        Self::with_weight(b, name, w, c_in, c_out, spec, bias, None)
    }

    /// Learned upsampling; weight laid out `(c_in, c_out, kh, kw)`.
    pub fn transposed(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        output_padding: usize,
        bias: bool,
        gain: f32,
    ) -> Result<Self> {
        let fan_in = c_in * spec.kernel_h * spec.kernel_w / (spec.stride * spec.stride).max(1);
        let std = gain / (fan_in.max(1) as f32).sqrt();
        let w = Tensor::randn([c_in, c_out, spec.kernel_h, spec.kernel_w], std, &mut b.rng);
        Self::with_weight(b, name, w, c_in, c_out, spec, bias, Some(output_padding))
    }

    #[allow(clippy::too_many_arguments)]
    fn with_weight(
        b: &mut Builder,
        name: &str,
        w: Tensor,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        bias: bool,
        transposed: Option<usize>,
    ) -> Result<Self> {
        let weight = b.store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(b.store.add(format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1]))?)
        } else {
            None
        };
        Ok(Conv {
            name: name.to_string(),
            weight,
            bias,
            spec,
            transposed,
            in_channels: c_in,
            out_channels: c_out,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let w = ctx.bind(self.weight);
        let b = self.bias.map(|b| ctx.bind(b));
        Ok(match self.transposed {
            Some(op) => ctx.graph.transposed_conv2d(x, w, b, self.spec, op)?,
            None => ctx.graph.conv2d(x, w, b, self.spec)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl InstanceNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, eps: f32) -> Result<Self> {
        Ok(InstanceNorm {
            gamma: b.store.add(format!("{name}.gamma"), Tensor::ones([1, channels, 1, 1]))?,
            beta: b.store.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]))?,
            eps,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let g = ctx.bind(self.gamma);
        let b = ctx.bind(self.beta);
        Ok(ctx.graph.instance_norm(x, g, b, self.eps)?)
    }
}

/// Convolution, optional instance norm, ELU. The bias is dropped when a norm
/// follows, since normalization cancels it.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub norm: Option<InstanceNorm>,
    pub alpha: f32,
}

impl ConvUnit {
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        norm: bool,
        alpha: f32,
        eps: f32,
    ) -> Result<Self> {
        let conv = Conv::new(b, name, c_in, c_out, spec, !norm, 2f32.sqrt())?;
        let norm = if norm {
            Some(InstanceNorm::new(b, &format!("{name}.norm"), c_out, eps)?)
        } else {
            None
        };
        Ok(ConvUnit { conv, norm, alpha })
    }

    pub fn transposed(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        output_padding: usize,
        norm: bool,
        alpha: f32,
        eps: f32,
    ) -> Result<Self> {
        let conv = Conv::transposed(b, name, c_in, c_out, spec, output_padding, !norm, 2f32.sqrt())?;
        let norm = if norm {
            Some(InstanceNorm::new(b, &format!("{name}.norm"), c_out, eps)?)
        } else {
            None
        };
        Ok(ConvUnit { conv, norm, alpha })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let mut y = self.conv.forward(ctx, x)?;
        if let Some(n) = &self.norm {
            y = n.forward(ctx, y)?;
        }
        Ok(ctx.graph.elu(y, self.alpha))
    }
}
