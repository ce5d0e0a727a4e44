//! The alternating discriminator/generator optimization loop.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use polypgan_tensor::{save_checkpoint, Adam, AdamConfig, Graph, NodeId, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{conditioned_to_tensor, jitter, tensor_to_rgb, TrainingPair};
use super::losses::{d_loss, g_gan_loss, recon_loss, total_g_loss};
use crate::conditioning::ConditionedImage;
use crate::error::{Error, Result};
use crate::imageio::write_rgb;
use crate::models::{Ctx, Discriminator, Generator};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Weight of the reconstruction term against the adversarial term.
    pub lambda: f32,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// Jitter enlarges by this ratio before cropping back.
    pub jitter_ratio: f64,
    pub seed: u64,
    /// Weights of the quarter, half and full-extent reconstruction terms.
    pub head_weights: [f32; 3],
    /// Checkpoint and sample cadence in steps; the final step is always saved.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 100.0,
            adam: AdamConfig::default(),
            batch_size: 1,
            steps: 2000,
            jitter_ratio: 312.0 / 256.0,
            seed: 0,
            head_weights: [1.0; 3],
            checkpoint_every: 500,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("training config", format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("training config", "batch size must be 1"));
        }
        if !(self.jitter_ratio > 1.0) {
            return Err(Error::invalid("training config", format!("jitter ratio {} must exceed 1", self.jitter_ratio)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("training config", "checkpoint cadence must be positive"));
        }
        if self.head_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(self.adam.lr > 0.0) {
            return Err(Error::invalid("training config", "head weights must be >= 0 and the learning rate > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub pair: usize,
    pub d_loss: f64,
    pub g_gan: f64,
    pub l2_s4: f64,
    pub l1_s2: f64,
    pub l1_s1: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    /// Scores clamped away from 0 or 1 before taking logs.
    pub clamped: usize,
}

impl StepReport {
    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g_gan, self.l2_s4, self.l1_s2, self.l1_s1, self.d_grad_norm, self.g_grad_norm]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A generator forward pass and the graph that recorded it.
pub struct GeneratorPass {
    pub graph: Graph,
    pub heads: [NodeId; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorUpdate {
    pub gan: f64,
    /// Unweighted quarter, half and full-extent reconstruction terms.
    pub terms: [f64; 3],
    pub grad_norm: f64,
    pub clamped: usize,
}

pub struct Trainer {
    pub gen: Generator,
    pub disc: Discriminator,
    pub config: TrainingConfig,
    g_opt: Adam,
    d_opt: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(gen: Generator, disc: Discriminator, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let (g, d) = (&gen.config, &disc.config);
        if g.extent != d.extent || g.in_channels + g.out_channels != d.in_channels {
            return Err(Error::invalid(
                "trainer",
                format!(
                    "generator {}x{} ({}+{} channels) does not match discriminator {}x{} ({} channels)",
                    g.extent, g.extent, g.in_channels, g.out_channels, d.extent, d.extent, d.in_channels
                ),
            ));
        }
        Ok(Trainer {
            g_opt: Adam::new(config.adam),
            d_opt: Adam::new(config.adam),
            gen,
            disc,
            config,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Generator pass on `pair`; the graph is kept for the generator update.
    pub fn forward_generator(&self, pair: &TrainingPair, step: u64) -> Result<GeneratorPass> {
        let mut dropout_rng = rng_for(self.config.seed, "dropout", step);
        let mut graph = Graph::new();
        let heads = {
            let mut ctx = Ctx::new(&mut graph, self.gen.store(), &mut dropout_rng);
            let x = ctx.graph.constant(pair.x.clone());
            self.gen.forward(&mut ctx, x)?.heads
        };
        Ok(GeneratorPass { graph, heads })
    }

    /// Discriminator update on (real, fake) where the fake enters as a plain
    /// value. Returns the loss, gradient norm and clamp count; a non-finite
    /// loss skips the update.
    pub fn update_discriminator(&mut self, pair: &TrainingPair, fake: &Tensor) -> Result<(f64, f64, usize)> {
        let mut graph = Graph::new();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (loss, clamped) = {
            let mut ctx = Ctx::new(&mut graph, self.disc.store(), &mut unused);
            let x = ctx.graph.constant(pair.x.clone());
            let y = ctx.graph.constant(pair.y.clone());
            let f = ctx.graph.constant(fake.clone());
            let real_score = self.disc.forward(&mut ctx, x, y)?;
            let fake_score = self.disc.forward(&mut ctx, x, f)?;
            d_loss(ctx.graph, real_score, fake_score)
        };
        let value = graph.value(loss).item() as f64;
        if !value.is_finite() {
            return Ok((value, f64::NAN, clamped));
        }
        self.disc.store_mut().zero_grad();
        graph.backward(loss, self.disc.store_mut())?;
        let norm = self.disc.store().grad_norm();
        self.d_opt.step(self.disc.store_mut());
        Ok((value, norm, clamped))
    }

    /// Generator update through the discriminator bound as constants.
    pub fn update_generator(&mut self, pass: GeneratorPass, pair: &TrainingPair) -> Result<GeneratorUpdate> {
        let GeneratorPass { mut graph, heads } = pass;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (total, gan, recon, clamped) = {
            let mut ctx = Ctx::new(&mut graph, self.disc.store(), &mut unused).frozen();
            let x = ctx.graph.constant(pair.x.clone());
            let score = self.disc.forward(&mut ctx, x, heads[2])?;
            let (gan, clamped) = g_gan_loss(ctx.graph, score);
            let recon = recon_loss(ctx.graph, heads, &pair.y, self.config.head_weights)?;
            let total = total_g_loss(ctx.graph, gan, recon.total, self.config.lambda);
            (total, gan, recon, clamped)
        };
        let mut grad_norm = f64::NAN;
        if (graph.value(total).item() as f64).is_finite() {
            self.gen.store_mut().zero_grad();
            graph.backward(total, self.gen.store_mut())?;
            grad_norm = self.gen.store().grad_norm();
            self.g_opt.step(self.gen.store_mut());
        }
        let item = |n| graph.value(n).item() as f64;
        Ok(GeneratorUpdate {
            gan: item(gan),
            terms: [item(recon.l2_quarter), item(recon.l1_half), item(recon.l1_full)],
            grad_norm,
            clamped,
        })
    }

    /// One discriminator update followed by one generator update on a jittered
    /// copy of `pair`.
    pub fn step(&mut self, pair: &TrainingPair, pair_index: usize) -> Result<StepReport> {
        self.step += 1;
        let step = self.step;
        let pair = jitter(pair, self.config.jitter_ratio, &mut rng_for(self.config.seed, "jitter", step))?;
        let pass = self.forward_generator(&pair, step)?;
        let fake = pass.graph.value(pass.heads[2]).clone();
        let (d_value, d_grad_norm, d_clamped) = self.update_discriminator(&pair, &fake)?;
        let g = self.update_generator(pass, &pair)?;
        Ok(StepReport {
            step,
            pair: pair_index,
            d_loss: d_value,
            g_gan: g.gan,
            l2_s4: g.terms[0],
            l1_s2: g.terms[1],
            l1_s1: g.terms[2],
            d_grad_norm,
            g_grad_norm: g.grad_norm,
            clamped: d_clamped + g.clamped,
        })
    }

    /// Writes `gen_<tag>` and `disc_<tag>` checkpoints; returns the generator manifest.
    pub fn save(&self, dir: &Path, tag: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = save_checkpoint(dir, &format!("gen_{tag}"), self.gen.store())?;
        save_checkpoint(dir, &format!("disc_{tag}"), self.disc.store())?;
        Ok(g)
    }

    /// Conditioned input, generated image and target side by side.
    pub fn sample_strip(&self, pair: &TrainingPair, seed: u64) -> Result<RgbImage> {
        let fake = run_generator(&self.gen, &pair.x, seed)?;
        let panels = [tensor_to_rgb(&pair.x)?, fake, tensor_to_rgb(&pair.y)?];
        let s = pair.extent() as u32;
        let mut strip = RgbImage::new(3 * s, s);
        for (k, p) in panels.iter().enumerate() {
            image::imageops::replace(&mut strip, p, k as i64 * s as i64, 0);
        }
        Ok(strip)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingRun {
    pub reports: Vec<StepReport>,
    /// Generator checkpoint manifests in the order written.
    pub checkpoints: Vec<PathBuf>,
}

/// Runs the remaining steps of `trainer.config.steps`. With an output
/// directory, writes `losses.csv`, `checkpoints/` and `samples/`.
pub fn train(trainer: &mut Trainer, pairs: &[TrainingPair], out: Option<&Path>) -> Result<TrainingRun> {
    if pairs.is_empty() {
        return Err(Error::invalid("training data", "no training pairs"));
    }
    let extent = trainer.gen.config.extent;
    if let Some(p) = pairs.iter().find(|p| p.extent() != extent) {
        return Err(Error::ExtentMismatch {
            op: "training",
            left: (p.extent(), p.extent()),
            right: (extent, extent),
        });
    }
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("losses.csv");
            Some((csv::Writer::from_path(&path).map_err(|e| Error::format(path.clone(), e.to_string()))?, path))
        }
        None => None,
    };
    let mut run = TrainingRun::default();
    let seed = trainer.config.seed;
    let cadence = trainer.config.checkpoint_every;
    while trainer.steps_done() < trainer.config.steps {
        let next = trainer.steps_done() + 1;
        let index = rng_for(seed, "pair", next).gen_range(0..pairs.len());
        let report = trainer.step(&pairs[index], index)?;
        if let Some((w, path)) = csv.as_mut() {
            w.serialize(report).map_err(|e| Error::format(path.clone(), e.to_string()))?;
        }
        run.reports.push(report);
        if !report.is_finite() {
            if let Some((w, path)) = csv.as_mut() {
                w.flush().map_err(|e| Error::io(path.clone(), e))?;
            }
            return Err(Error::NonFinite {
                step: report.step,
                detail: format!("{report:?}"),
            });
        }
        let last = report.step == trainer.config.steps;
        if report.step % cadence == 0 || last {
            log::info!(
                "step {}: d {:.4} g_gan {:.4} l1 {:.4}",
                report.step,
                report.d_loss,
                report.g_gan,
                report.l1_s1
            );
        }
        if let Some(dir) = out {
            if report.step % cadence == 0 || last {
                let tag = if last { "final".to_string() } else { format!("step{:06}", report.step) };
                run.checkpoints.push(trainer.save(&dir.join("checkpoints"), &tag)?);
                let samples = dir.join("samples");
                fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
                let strip = trainer.sample_strip(&pairs[0], seed)?;
                write_rgb(&samples.join(format!("step{:06}.png", report.step)), &strip)?;
            }
        }
    }
    if let Some((w, path)) = csv.as_mut() {
        w.flush().map_err(|e| Error::io(path.clone(), e))?;
    }
    Ok(run)
}

fn run_generator(gen: &Generator, x: &Tensor, seed: u64) -> Result<RgbImage> {
    let mut graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // dropout stays active: it is the noise source
    let mut ctx = Ctx::new(&mut graph, gen.store(), &mut rng).frozen();
    let x = ctx.graph.constant(x.clone());
    let out = gen.forward(&mut ctx, x)?;
    tensor_to_rgb(graph.value(out.heads[2]))
}

/// Full-extent image for a conditioned input; `seed` drives the dropout noise.
pub fn generate(gen: &Generator, conditioned: &ConditionedImage, seed: u64) -> Result<RgbImage> {
    let (w, h) = conditioned.dims();
    let s = gen.config.extent;
    if w != s || h != s {
        return Err(Error::ExtentMismatch {
            op: "generate",
            left: (w, h),
            right: (s, s),
        });
    }
    run_generator(gen, &conditioned_to_tensor(conditioned), seed)
}
