//! Patch discriminator over (conditioned input, candidate image) pairs.

use polypgan_tensor::{ConvSpec, NodeId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Builder, Conv, ConvUnit, Ctx};
use super::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub extent: usize,
    /// Channels of the conditioned input plus channels of the image.
    pub in_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    /// Stride-2 stages; the patch grid is extent / 2^stages.
    pub stages: usize,
    pub elu_alpha: f32,
    pub norm_eps: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            extent: 256,
            in_channels: 4,
            base_width: 64,
            max_width: 512,
            stages: 3,
            elu_alpha: 1.0,
            norm_eps: 1e-5,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            extent: 64,
            base_width: 16,
            ..Self::default()
        }
    }

    pub fn grid_extent(&self) -> usize {
        self.extent >> self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.extent % (1 << self.stages) != 0 || self.grid_extent() < 4 {
            return Err(Error::invalid(
                "discriminator config",
                format!("{} stages on extent {} do not leave a patch grid of at least 4x4", self.stages, self.extent),
            ));
        }
        if self.base_width == 0 || self.in_channels == 0 || self.max_width < self.base_width {
            return Err(Error::invalid("discriminator config", "channel widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    store: ParamStore,
    pub stages: Vec<ConvUnit>,
    pub score: Conv,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let mut stages = Vec::with_capacity(config.stages);
        let mut c_in = config.in_channels;
        for k in 0..config.stages {
            let w = (config.base_width << k).min(config.max_width);
            stages.push(ConvUnit::new(
                &mut b,
                &format!("stage{k}"),
                c_in,
                w,
                ConvSpec::new(3, 2, 1, 1),
                k > 0,
                config.elu_alpha,
                config.norm_eps,
            )?);
            c_in = w;
        }
        let score = Conv::new(&mut b, "score", c_in, 1, ConvSpec::new(1, 1, 1, 0), true, 1.0)?;
        Ok(Discriminator {
            config,
            store: b.store,
            stages,
            score,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Patch scores in (0, 1) for the pair `(x, y)`.
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId, y: NodeId) -> Result<NodeId> {
        let mut h = ctx.graph.concat_channels(&[x, y])?;
        let s = ctx.graph.shape(h);
        if s.channels() != self.config.in_channels || s.height() != self.config.extent || s.width() != self.config.extent {
            return Err(Error::invalid("discriminator input", format!("pair shape {:?}", s.0)));
        }
        for unit in &self.stages {
            h = unit.forward(ctx, h)?;
        }
        let logits = self.score.forward(ctx, h)?;
        Ok(ctx.graph.sigmoid(logits))
    }
}

impl Network for Discriminator {
    fn kind(&self) -> &'static str {
        "discriminator"
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}
