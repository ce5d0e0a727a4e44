//! Parameter accounting, receptive-field arithmetic and the checkerboard
//! diagnostic.

use std::io::Write;
use std::path::Path;

use polypgan_tensor::{ConvSpec, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::generator::{Generator, GeneratorConfig};
use super::layers::Ctx;
use super::Network;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub shape: [usize; 4],
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub kind: String,
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

impl ParamReport {
    /// `name,shape,count` rows in construction order, then a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,shape,count\n");
        for r in &self.rows {
            let [a, b, c, d] = r.shape;
            out.push_str(&format!("{},{a}x{b}x{c}x{d},{}\n", r.name, r.count));
        }
        out.push_str(&format!("TOTAL,,{}\n", self.total));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn count_params(net: &dyn Network) -> ParamReport {
    let rows: Vec<ParamRow> = net
        .params()
        .iter()
        .map(|(_, p)| ParamRow {
            name: p.name.clone(),
            shape: p.value.dims(),
            count: p.value.numel(),
        })
        .collect();
    let total = rows.iter().map(|r| r.count).sum();
    ParamReport {
        kind: net.kind().to_string(),
        rows,
        total,
    }
}

/// One stage of a feed-forward chain: parallel `kernel`-sized taps at each
/// dilation, summed, then subsampled by `stride`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfLayer {
    pub kernel: usize,
    pub stride: usize,
    pub dilations: Vec<usize>,
}

impl RfLayer {
    pub fn conv(kernel: usize, stride: usize, dilation: usize) -> Self {
        RfLayer {
            kernel,
            stride,
            dilations: vec![dilation],
        }
    }
}

/// Receptive-field extent after each layer; parallel branches contribute
/// their widest footprint.
pub fn layer_receptive_fields(layers: &[RfLayer]) -> Vec<usize> {
    let (mut r, mut jump) = (1usize, 1usize);
    layers
        .iter()
        .map(|l| {
            let d = l.dilations.iter().copied().max().unwrap_or(1);
            r += (l.kernel - 1) * d * jump;
            jump *= l.stride;
            r
        })
        .collect()
}

/// The encoder as a chain: dilated branches, 1×1 fuse, stride-2 downsample.
pub fn encoder_layers(config: &GeneratorConfig) -> Vec<Vec<RfLayer>> {
    (0..config.blocks)
        .map(|_| {
            vec![
                RfLayer {
                    kernel: 3,
                    stride: 1,
                    dilations: config.dilations.clone(),
                },
                RfLayer::conv(1, 1, 1),
                RfLayer::conv(3, 2, 1),
            ]
        })
        .collect()
}

/// Receptive field at the output of each encoder block.
pub fn receptive_field(config: &GeneratorConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let blocks = encoder_layers(config);
    let flat: Vec<RfLayer> = blocks.iter().flatten().cloned().collect();
    let per_layer = layer_receptive_fields(&flat);
    let mut out = Vec::with_capacity(blocks.len());
    let mut end = 0;
    for b in &blocks {
        end += b.len();
        out.push(per_layer[end - 1]);
    }
    Ok(out)
}

/// Impulse-support measurement: runs the chain with all-ones single-channel
/// kernels, takes the input gradient of one central output pixel and returns
/// the extent of its nonzero rows.
pub fn measured_receptive_field(layers: &[RfLayer]) -> Result<usize> {
    let analytic = layer_receptive_fields(layers).last().copied().unwrap_or(1);
    let total_stride: usize = layers.iter().map(|l| l.stride).product();
    let n = (2 * analytic + 4 * total_stride).next_power_of_two();
    let mut g = Graph::new();
    let x = g.variable(Tensor::ones([1, 1, n, n]));
    let mut h = x;
    for l in layers {
        let mut acc = None;
        for &d in &l.dilations {
            let w = g.constant(Tensor::ones([1, 1, l.kernel, l.kernel]));
            let pad = (l.kernel - 1) / 2 * d;
            let y = g.conv2d(h, w, None, ConvSpec::new(l.kernel, l.stride, d, pad))?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        h = acc.ok_or_else(|| Error::invalid("receptive field", "layer without dilations"))?;
    }
    let s = g.shape(h);
    let mut pick = Tensor::zeros(s);
    pick.set(0, 0, s.height() / 2, s.width() / 2, 1.0);
    let pick = g.constant(pick);
    let picked = g.mul(h, pick)?;
    let loss = g.sum(picked);
    let grads = g.gradients(loss)?;
    let gx = grads
        .get(x)
        .ok_or_else(|| Error::invalid("receptive field", "input received no gradient"))?;
    let rows: Vec<usize> = (0..n).filter(|&r| (0..n).any(|c| gx.at(0, 0, r, c) != 0.0)).collect();
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => Ok(b - a + 1),
        _ => Ok(0),
    }
}

/// Mean population variance inside 2×2 tiles aligned to even coordinates,
/// over the interior that lies at least `border` pixels from every edge.
pub fn phase_tile_variance(t: &Tensor, border: usize) -> f64 {
    let [n, c, h, w] = t.dims();
    let start = border.div_ceil(2) * 2;
    let (mut total, mut tiles) = (0.0f64, 0usize);
    for b in 0..n {
        for ch in 0..c {
            let mut y = start;
            while y + 2 + border <= h {
                let mut x = start;
                while x + 2 + border <= w {
                    let v = [
                        t.at(b, ch, y, x) as f64,
                        t.at(b, ch, y, x + 1) as f64,
                        t.at(b, ch, y + 1, x) as f64,
                        t.at(b, ch, y + 1, x + 1) as f64,
                    ];
                    let mean = v.iter().sum::<f64>() / 4.0;
                    total += v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
                    tiles += 1;
                    x += 2;
                }
                y += 2;
            }
        }
    }
    if tiles == 0 {
        0.0
    } else {
        total / tiles as f64
    }
}

/// Width of the zero-padding contamination at the full-extent head, grown per
/// decoder stage as `b -> 2b + 2`.
pub fn decoder_border(blocks: usize) -> usize {
    (0..blocks).fold(0, |b, _| 2 * b + 2)
}

/// Drives the decoder with a constant bottleneck and constant skips from
/// freshly initialized generators and reports the mean phase-tile variance of
/// the full-extent head.
pub fn checkerboard_metric(config: &GeneratorConfig, trials: usize, seed: u64) -> Result<f64> {
    config.validate()?;
    if trials == 0 {
        return Err(Error::invalid("checkerboard trials", "need at least one trial"));
    }
    let b = config.blocks;
    let border = decoder_border(b);
    let mut sum = 0.0;
    for t in 0..trials {
        let gen = Generator::new(config.clone(), derive_seed(seed, "checkerboard", t as u64))?;
        let mut graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx::new(&mut graph, gen.store(), &mut rng).frozen().training(false);
        let ext = config.bottleneck_extent();
        let bottleneck = ctx.graph.constant(Tensor::ones([1, config.width(b), ext, ext]));
        let skips: Vec<_> = (0..b)
            .map(|i| {
                let e = config.extent >> i;
                ctx.graph.constant(Tensor::ones([1, config.width(i), e, e]))
            })
            .collect();
        let heads = gen.decode(&mut ctx, bottleneck, &skips)?;
        sum += phase_tile_variance(ctx.graph.value(heads[2]), border);
    }
    Ok(sum / trials as f64)
}
