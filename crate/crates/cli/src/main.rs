//! `polypgan`: one binary with a subcommand per workflow.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use polypgan_core::canny::{CannyParams, Thresholds};
use polypgan_core::mask_synth::{MaskValidity, ParamRanges};
use polypgan_core::models::{DiscriminatorConfig, GeneratorConfig};
use polypgan_core::pipeline::{self, read_json, RunConfig};
use polypgan_core::training::TrainingConfig;

#[derive(Parser)]
#[command(name = "polypgan", version, about = "Conditioned polyp image synthesis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset of polyp and normal frames.
    SynthData {
        #[arg(long)]
        polyp: usize,
        #[arg(long)]
        normal: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Augment polyp frames and build conditioned training pairs.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One pair per input frame, no geometric variants.
        #[arg(long)]
        no_augment: bool,
        #[command(flatten)]
        canny: CannyArgs,
    },
    /// Conditioned inference inputs from normal frames and warped pool masks.
    SynthMasks {
        #[arg(long)]
        manifest: PathBuf,
        /// Mask pool; defaults to the polyp masks of --manifest.
        #[arg(long)]
        mask_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        canny: CannyArgs,
    },
    /// Adversarial training on a pair manifest.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generator architecture JSON; defaults to the desk configuration.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Discriminator architecture JSON.
        #[arg(long)]
        disc: Option<PathBuf>,
        /// Training configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f32>,
    },
    /// Generate images from conditioned inputs with a trained generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generator architecture JSON; defaults to the training run's run.json.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score detections against ground-truth masks.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `center` or `iou`.
        #[arg(long, default_value = "center")]
        rule: String,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Treat separate mask components as separate polyps.
        #[arg(long)]
        split_components: bool,
    },
    /// Toy bright-blob detector over a manifest's images.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150)]
        threshold: u8,
        #[arg(long, default_value_t = 20)]
        min_area: usize,
    },
    /// Parameter counts, receptive fields and checkerboard metrics.
    Analyze {
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct CannyArgs {
    #[arg(long, default_value_t = 1.4)]
    sigma: f64,
    /// Low hysteresis threshold, a fraction of the peak magnitude.
    #[arg(long, default_value_t = 0.1)]
    low: f64,
    /// High hysteresis threshold, a fraction of the peak magnitude.
    #[arg(long, default_value_t = 0.3)]
    high: f64,
    /// Read --low/--high as absolute gradient magnitudes.
    #[arg(long)]
    absolute: bool,
}

impl CannyArgs {
    fn params(&self) -> CannyParams {
        let (low, high) = (self.low, self.high);
        CannyParams {
            sigma: self.sigma,
            thresholds: if self.absolute {
                Thresholds::Absolute { low, high }
            } else {
                Thresholds::Relative { low, high }
            },
        }
    }
}

fn json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { polyp, normal, size, seed, out } => {
            let m = pipeline::synth_data(&pipeline::SynthDataArgs { polyp, normal, size, seed, out: out.clone() })?;
            log::info!("wrote {} frames to {}", m.entries.len(), out.display());
        }
        Command::Prepare { manifest, out, no_augment, canny } => {
            let m = pipeline::prepare(&pipeline::PrepareArgs {
                manifest,
                out: out.clone(),
                augment: !no_augment,
                canny: canny.params(),
            })?;
            log::info!("wrote {} training pairs to {}", m.entries.len(), out.display());
        }
        Command::SynthMasks { manifest, mask_manifest, out, seed, canny } => {
            let m = pipeline::synth_masks(&pipeline::SynthMasksArgs {
                manifest,
                mask_manifest,
                out: out.clone(),
                seed,
                ranges: ParamRanges::default(),
                validity: MaskValidity::default(),
                canny: canny.params(),
            })?;
            log::info!("wrote {} conditioned inputs to {}", m.entries.len(), out.display());
        }
        Command::Train { pairs, out, arch, disc, config, steps, seed, lambda } => {
            let extent = polypgan_core::manifest::DatasetManifest::read(&pairs)?.extent;
            let mut run = RunConfig::desk(extent);
            if let Some(p) = arch {
                run.generator = json::<GeneratorConfig>(&p)?;
            }
            run.discriminator = match disc {
                Some(p) => json::<DiscriminatorConfig>(&p)?,
                None => DiscriminatorConfig {
                    extent: run.generator.extent,
                    in_channels: run.generator.in_channels + run.generator.out_channels,
                    ..run.discriminator
                },
            };
            if let Some(p) = config {
                run.training = json::<TrainingConfig>(&p)?;
            }
            if let Some(s) = steps {
                run.training.steps = s;
            }
            if let Some(s) = seed {
                run.training.seed = s;
            }
            if let Some(l) = lambda {
                run.training.lambda = l;
            }
            let outcome = pipeline::train(&pipeline::TrainArgs { pairs, out, config: run })?;
            log::info!(
                "trained {} steps; full-extent L1 {:.4} -> {:.4}; checkpoint {}",
                outcome.steps,
                outcome.first_l1,
                outcome.last_l1,
                outcome.final_checkpoint.display()
            );
        }
        Command::Generate { checkpoint, arch, inputs, out, seed, limit } => {
            let m = pipeline::generate(&pipeline::GenerateArgs { checkpoint, arch, inputs, out: out.clone(), seed, limit })?;
            log::info!("generated {} images in {}", m.entries.len(), out.display());
        }
        Command::Eval { detections, ground_truth, out, rule, iou, split_components } => {
            let options = pipeline::scoring_options(&rule, iou, split_components)?;
            let s = pipeline::eval(&pipeline::EvalArgs { detections, ground_truth, out: out.clone(), options })?;
            log::info!("precision {:?} recall {:?}; report in {}", s.precision, s.recall, out.display());
        }
        Command::Detect { manifest, out, threshold, min_area } => {
            let n = pipeline::detect(&pipeline::DetectArgs { manifest, out: out.clone(), threshold, min_area })?;
            log::info!("wrote {n} detections to {}", out.display());
        }
        Command::Analyze { arch, out, trials, seed } => {
            let arch = match arch {
                Some(p) => json::<GeneratorConfig>(&p)?,
                None => GeneratorConfig::default(),
            };
            let a = pipeline::analyze(&pipeline::AnalyzeArgs { arch, out: out.clone(), trials, seed })?;
            log::info!(
                "generator {} vs baseline {} parameters (ratio {:.3}); results in {}",
                a.generator_params,
                a.baseline_params,
                a.ratio,
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<polypgan_core::Error>().is_some_and(|e| e.is_numeric()));
    if numeric {
        4
    } else {
        3
    }
}

/// The error chain joined by ": ", skipping causes a parent message already embeds.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
