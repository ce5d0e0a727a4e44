//! Reference U-net: stride-2 convolutions down to 1×1, transposed-convolution
//! decoder with skips, one tanh head.

use polypgan_tensor::{ConvSpec, NodeId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Builder, ConvUnit, Ctx};
use super::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub extent: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub dropout: f32,
    /// Decoder stages (from the bottleneck) that apply dropout.
    pub dropout_stages: usize,
    pub elu_alpha: f32,
    pub norm_eps: f32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            extent: 256,
            in_channels: 1,
            out_channels: 3,
            base_width: 64,
            max_width: 256,
            dropout: 0.5,
            dropout_stages: 3,
            elu_alpha: 1.0,
            norm_eps: 1e-5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 2 || !self.extent.is_power_of_two() {
            return Err(Error::invalid("baseline config", format!("extent {} is not a power of two", self.extent)));
        }
        if self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::invalid("baseline config", "channel widths must be positive"));
        }
        Ok(())
    }

    /// log2(extent) stride-2 stages reach a 1×1 bottleneck.
    pub fn stages(&self) -> usize {
        self.extent.trailing_zeros() as usize
    }

    pub fn width(&self, k: usize) -> usize {
        (self.base_width << k.min(30)).min(self.max_width)
    }
}

#[derive(Debug)]
pub struct BaselineUnet {
    pub config: BaselineConfig,
    store: ParamStore,
    pub encoder: Vec<ConvUnit>,
    /// All but the last stage concatenate a skip after upsampling.
    pub decoder: Vec<ConvUnit>,
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub image: NodeId,
    pub bottleneck: NodeId,
}

impl BaselineUnet {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let l = config.stages();
        let (alpha, eps) = (config.elu_alpha, config.norm_eps);
        let down = ConvSpec::new(3, 2, 1, 1);
        let mut encoder = Vec::with_capacity(l);
        for k in 0..l {
            let c_in = if k == 0 { config.in_channels } else { config.width(k - 1) };
            // no norm on the first stage or at 1×1, where variance is zero
            let norm = k > 0 && config.extent >> (k + 1) > 1;
            encoder.push(ConvUnit::new(&mut b, &format!("enc{k}"), c_in, config.width(k), down, norm, alpha, eps)?);
        }
        let mut decoder = Vec::with_capacity(l);
        let mut c_in = config.width(l - 1);
        for j in 0..l {
            let last = j + 1 == l;
            let c_out = if last { config.out_channels } else { config.width(l - 2 - j) };
            let unit = ConvUnit::transposed(&mut b, &format!("dec{j}"), c_in, c_out, down, 1, !last, alpha, eps)?;
            decoder.push(unit);
            c_in = 2 * c_out;
        }
        Ok(BaselineUnet {
            config,
            store: b.store,
            encoder,
            decoder,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<BaselineOutput> {
        let s = ctx.graph.shape(x);
        if s.height() != self.config.extent || s.width() != self.config.extent || s.channels() != self.config.in_channels {
            return Err(Error::invalid("baseline input", format!("shape {:?}", s.0)));
        }
        let l = self.encoder.len();
        let mut skips = Vec::with_capacity(l);
        let mut h = x;
        for unit in &self.encoder {
            h = unit.forward(ctx, h)?;
            skips.push(h);
        }
        let bottleneck = h;
        for (j, unit) in self.decoder.iter().enumerate() {
            if j + 1 == l {
                // last stage: plain transposed conv into tanh, no norm or ELU
                let y = unit.conv.forward(ctx, h)?;
                h = ctx.graph.tanh(y);
                break;
            }
            let mut up = unit.forward(ctx, h)?;
            if j < self.config.dropout_stages {
                up = ctx.graph.dropout(up, self.config.dropout, &mut *ctx.rng, ctx.training)?;
            }
            h = ctx.graph.concat_channels(&[up, skips[l - 2 - j]])?;
        }
        Ok(BaselineOutput { image: h, bottleneck })
    }
}

impl Network for BaselineUnet {
    fn kind(&self) -> &'static str {
        "baseline_unet"
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }
}
