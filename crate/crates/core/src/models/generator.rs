//! Encoder of parallel dilated convolutions, resize+conv (or transposed)
//! decoder with skip connections, and image heads at S/4, S/2 and S.

use polypgan_tensor::{ConvSpec, NodeId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Builder, Conv, ConvUnit, Ctx};
use super::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// Nearest-neighbour resize by 2 then a 3×3 convolution.
    ResizeConv,
    /// 3×3 stride-2 transposed convolution.
    TransposedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Square input extent S.
    pub extent: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the first encoder block; doubles per block up to `max_width`.
    pub base_width: usize,
    pub max_width: usize,
    pub dilations: Vec<usize>,
    /// Encoder blocks B; the bottleneck extent is S / 2^B.
    pub blocks: usize,
    pub upsampling: Upsampling,
    pub dropout: f32,
    pub elu_alpha: f32,
    pub norm_eps: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            extent: 256,
            in_channels: 1,
            out_channels: 3,
            base_width: 64,
            max_width: 256,
            dilations: vec![1, 2, 4],
            blocks: 3,
            upsampling: Upsampling::ResizeConv,
            dropout: 0.5,
            elu_alpha: 1.0,
            norm_eps: 1e-5,
        }
    }
}

impl GeneratorConfig {
    /// 64×64, base width 16.
    pub fn desk() -> Self {
        GeneratorConfig {
            extent: 64,
            base_width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("generator config", reason));
        if self.blocks < 3 {
            return bad(format!("{} blocks; three image heads need at least 3", self.blocks));
        }
        let scale = 1usize << self.blocks;
        if self.extent == 0 || self.extent % scale != 0 {
            return bad(format!("extent {} is not divisible by 2^{}", self.extent, self.blocks));
        }
        if self.extent / scale < 4 {
            return bad(format!("bottleneck extent {} is below 4", self.extent / scale));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilation set must be non-empty and positive".into());
        }
        if self.base_width == 0 || self.max_width < self.base_width || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel widths must be positive with max_width >= base_width".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if !(self.elu_alpha > 0.0 && self.norm_eps > 0.0) {
            return bad("elu alpha and norm eps must be positive".into());
        }
        Ok(())
    }

    /// Channel width of encoder block `i`; index `blocks` is the bottleneck.
    pub fn width(&self, i: usize) -> usize {
        (self.base_width << i.min(30)).min(self.max_width)
    }

    pub fn bottleneck_extent(&self) -> usize {
        self.extent >> self.blocks
    }

    /// Extents of the three heads, smallest first.
    pub fn head_extents(&self) -> [usize; 3] {
        [self.extent / 4, self.extent / 2, self.extent]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    /// One 3×3 convolution per dilation rate, all reading the block input.
    pub branches: Vec<ConvUnit>,
    /// 1×1 convolution over the concatenated branches.
    pub fuse: ConvUnit,
    pub dropout: bool,
    /// Stride-2 3×3 convolution to the next width.
    pub down: ConvUnit,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    /// 3×3 convolution after a resize, or the transposed convolution itself.
    pub up: ConvUnit,
    pub resize_first: bool,
}

#[derive(Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    store: ParamStore,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    /// 1×1 + tanh heads on the last three decoder blocks, smallest extent first.
    pub heads: Vec<Conv>,
}

/// Graph nodes of one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// Images at S/4, S/2, S.
    pub heads: [NodeId; 3],
    pub bottleneck: NodeId,
    /// Pre-downsample activations, block 0 first.
    pub skips: Vec<NodeId>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let (alpha, eps) = (config.elu_alpha, config.norm_eps);
        let mut encoder = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let c_in = if i == 0 { config.in_channels } else { config.width(i) };
            let w = config.width(i);
            let branches = config
                .dilations
                .iter()
                .enumerate()
                .map(|(k, &d)| ConvUnit::new(&mut b, &format!("enc{i}.branch{k}"), c_in, w, ConvSpec::same(3, d), true, alpha, eps))
                .collect::<Result<Vec<_>>>()?;
            let fuse = ConvUnit::new(
                &mut b,
                &format!("enc{i}.fuse"),
                w * config.dilations.len(),
                w,
                ConvSpec::new(1, 1, 1, 0),
                true,
                alpha,
                eps,
            )?;
            let down = ConvUnit::new(
                &mut b,
                &format!("enc{i}.down"),
                w,
                config.width(i + 1),
                ConvSpec::new(3, 2, 1, 1),
                true,
                alpha,
                eps,
            )?;
            encoder.push(EncoderBlock {
                branches,
                fuse,
                dropout: i > 0,
                down,
            });
        }

        let mut decoder = Vec::with_capacity(config.blocks);
        let mut c_in = config.width(config.blocks);
        for j in 0..config.blocks {
            let skip = config.width(config.blocks - 1 - j);
            let name = format!("dec{j}.up");
            let up = match config.upsampling {
                Upsampling::ResizeConv => ConvUnit::new(&mut b, &name, c_in, skip, ConvSpec::same(3, 1), true, alpha, eps)?,
                Upsampling::TransposedConv => {
                    ConvUnit::transposed(&mut b, &name, c_in, skip, ConvSpec::new(3, 2, 1, 1), 1, true, alpha, eps)?
                }
            };
            decoder.push(DecoderBlock {
                up,
                resize_first: config.upsampling == Upsampling::ResizeConv,
            });
            c_in = 2 * skip;
        }

        let mut heads = Vec::with_capacity(3);
        for j in config.blocks - 3..config.blocks {
            let c = 2 * config.width(config.blocks - 1 - j);
            heads.push(Conv::new(&mut b, &format!("head{j}"), c, config.out_channels, ConvSpec::new(1, 1, 1, 0), true, 1.0)?);
        }
        Ok(Generator {
            config,
            store: b.store,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, ctx: &Ctx, x: NodeId) -> Result<()> {
        let s = ctx.graph.shape(x);
        let c = &self.config;
        if s.channels() != c.in_channels || s.height() != c.extent || s.width() != c.extent {
            return Err(Error::invalid(
                "generator input",
                format!(
                    "shape {:?} does not match {} channel(s) at {}x{}",
                    s.0, c.in_channels, c.extent, c.extent
                ),
            ));
        }
        Ok(())
    }

    /// Encoder only: returns the bottleneck and the skips.
    pub fn encode(&self, ctx: &mut Ctx, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_input(ctx, x)?;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let parts = block
                .branches
                .iter()
                .map(|u| u.forward(ctx, h))
                .collect::<Result<Vec<_>>>()?;
            let cat = if parts.len() == 1 { parts[0] } else { ctx.graph.concat_channels(&parts)? };
            let mut fused = block.fuse.forward(ctx, cat)?;
            if block.dropout {
                fused = ctx.graph.dropout(fused, self.config.dropout, &mut *ctx.rng, ctx.training)?;
            }
            skips.push(fused);
            h = block.down.forward(ctx, fused)?;
        }
        Ok((h, skips))
    }

    /// Decoder and heads from a bottleneck and skips (block 0 first).
    pub fn decode(&self, ctx: &mut Ctx, bottleneck: NodeId, skips: &[NodeId]) -> Result<[NodeId; 3]> {
        let b = self.config.blocks;
        let mut h = bottleneck;
        let mut outs = Vec::with_capacity(3);
        for (j, block) in self.decoder.iter().enumerate() {
            let up_in = if block.resize_first { ctx.graph.nearest_resize(h, 2)? } else { h };
            let up = block.up.forward(ctx, up_in)?;
            h = ctx.graph.concat_channels(&[up, skips[b - 1 - j]])?;
            if j + 3 >= b {
                let head = &self.heads[j + 3 - b];
                let y = head.forward(ctx, h)?;
                outs.push(ctx.graph.tanh(y));
            }
        }
        Ok([outs[0], outs[1], outs[2]])
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<GeneratorOutput> {
        let (bottleneck, skips) = self.encode(ctx, x)?;
        let heads = self.decode(ctx, bottleneck, &skips)?;
        Ok(GeneratorOutput {
            heads,
            bottleneck,
            skips,
        })
    }
}

impl Network for Generator {
    fn kind(&self) -> &'static str {
        "generator"
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}
