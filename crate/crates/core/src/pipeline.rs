//! File-level workflows behind the command-line subcommands.
//!
//! Every command writes into a staging directory next to its output and
//! renames it into place at the end, so an output directory is either
//! complete or absent. Rerunning a command replaces an output directory it
//! wrote before; any other non-empty directory is refused.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;

use crate::canny::{canny, CannyParams};
use crate::conditioning::{combine, make_training_pair, to_grayscale, ConditionedImage};
use crate::detection::{self, ContainmentRule, ScoringOptions, Summary};
use crate::error::{Error, Result};
use crate::imageio::{read_gray, read_mask, read_rgb, write_mask, write_rgb};
use crate::manifest::{resolve, DatasetEntry, DatasetManifest};
use crate::mask::BinaryMask;
use crate::mask_synth::{augment_dataset, synth_mask, AugmentationRecipe, MaskValidity, ParamRanges};
use crate::models::analysis::decoder_border;
use crate::models::{
    checkerboard_metric, count_params, receptive_field, BaselineConfig, BaselineUnet, Discriminator, DiscriminatorConfig,
    Generator, GeneratorConfig, Upsampling,
};
use crate::seed::{derive_seed, rng_for};
use crate::training::{self, Trainer, TrainingConfig, TrainingPair};

const MARKER: &str = ".polypgan-output";

fn staging_path(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::invalid("output directory", format!("{} has no final component", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(parent.join(format!(".{}.staging", name.to_string_lossy())))
}

/// Creates an empty staging directory for `out`.
pub fn stage(out: &Path) -> Result<PathBuf> {
    if out.exists() {
        let owned = out.join(MARKER).exists();
        let empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none();
        if !out.is_dir() || !(owned || empty) {
            return Err(Error::invalid(
                "output directory",
                format!("{} exists and was not written by this tool", out.display()),
            ));
        }
    }
    let staging = staging_path(out)?;
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    Ok(staging)
}

/// Moves a finished staging directory into place.
pub fn commit(staging: &Path, out: &Path) -> Result<()> {
    let marker = staging.join(MARKER);
    fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(staging, out).map_err(|e| Error::io(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn mkdirs(root: &Path, subs: &[&str]) -> Result<()> {
    for s in subs {
        let d = root.join(s);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

pub struct SynthDataArgs {
    pub polyp: usize,
    pub normal: usize,
    pub size: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth_data(args: &SynthDataArgs) -> Result<DatasetManifest> {
    let staging = stage(&args.out)?;
    let manifest = crate::synth_data::make_dataset(args.polyp, args.normal, args.size, args.seed, &staging)?;
    commit(&staging, &args.out)?;
    Ok(manifest)
}

pub struct PrepareArgs {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub augment: bool,
    pub canny: CannyParams,
}

/// Augments every polyp frame/mask pair and writes conditioned inputs,
/// targets and masks with a pair manifest.
pub fn prepare(args: &PrepareArgs) -> Result<DatasetManifest> {
    let source = DatasetManifest::read(&args.manifest)?;
    let entries: Vec<&DatasetEntry> = source.polyp_entries().collect();
    let mut inputs = Vec::with_capacity(entries.len());
    for e in &entries {
        let image = read_rgb(&resolve(&args.manifest, &e.image))?;
        let mask = read_mask(&resolve(&args.manifest, e.mask.as_deref().unwrap_or_default()))?;
        inputs.push((image, mask));
    }
    let recipe = if args.augment { AugmentationRecipe::default() } else { AugmentationRecipe::none() };
    let augmented = augment_dataset(&inputs, &recipe)?;

    let staging = stage(&args.out)?;
    mkdirs(&staging, &["conditioned", "images", "masks"])?;
    let mut manifest = DatasetManifest::new(source.extent, source.seed);
    for pair in &augmented {
        let src = entries[pair.source_index];
        let tag = pair.variant.tag();
        let id = format!("{}_{tag}", src.id);
        let (x, y) = make_training_pair(&pair.image, &pair.mask, &args.canny)?;
        let (x_rel, y_rel, m_rel) = (
            format!("conditioned/{id}.png"),
            format!("images/{id}.png"),
            format!("masks/{id}.png"),
        );
        write_mask(&staging.join(&x_rel), x.pixels())?;
        write_rgb(&staging.join(&y_rel), &y)?;
        write_mask(&staging.join(&m_rel), &pair.mask)?;
        let mut transforms = src.transforms.clone();
        transforms.push(tag);
        manifest.entries.push(DatasetEntry {
            id,
            image: y_rel,
            mask: Some(m_rel),
            conditioned: Some(x_rel),
            source: src.source.clone(),
            transforms,
            params: None,
        });
    }
    manifest.write(&staging.join("manifest.json"))?;
    commit(&staging, &args.out)?;
    Ok(manifest)
}

pub struct SynthMasksArgs {
    /// Normal frames are read from this manifest.
    pub manifest: PathBuf,
    /// Mask pool; defaults to the polyp masks of `manifest`.
    pub mask_manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub ranges: ParamRanges,
    pub validity: MaskValidity,
    pub canny: CannyParams,
}

/// For every normal frame: edges, a warped pool mask, and their union.
pub fn synth_masks(args: &SynthMasksArgs) -> Result<DatasetManifest> {
    let frames = DatasetManifest::read(&args.manifest)?;
    let pool_path = args.mask_manifest.as_deref().unwrap_or(&args.manifest);
    let pool_manifest = DatasetManifest::read(pool_path)?;
    let mut pool = Vec::new();
    for e in pool_manifest.polyp_entries() {
        let mask = read_mask(&resolve(pool_path, e.mask.as_deref().unwrap_or_default()))?;
        pool.push((e.id.clone(), mask));
    }
    if pool.is_empty() {
        return Err(Error::invalid("mask pool", format!("{} lists no masks", pool_path.display())));
    }

    let staging = stage(&args.out)?;
    mkdirs(&staging, &["conditioned", "images", "masks"])?;
    let mut manifest = DatasetManifest::new(frames.extent, args.seed);
    for (i, e) in frames.normal_entries().enumerate() {
        let frame = read_rgb(&resolve(&args.manifest, &e.image))?;
        let edges = canny(&to_grayscale(&frame), &args.canny)?;
        let mut rng = rng_for(args.seed, "synth_mask", i as u64);
        let synth = synth_mask(&pool, &args.ranges, &args.validity, &mut rng)?;
        let conditioned = combine(&edges, &synth.mask)?;
        let (x_rel, f_rel, m_rel) = (
            format!("conditioned/{}.png", e.id),
            format!("images/{}.png", e.id),
            format!("masks/{}.png", e.id),
        );
        write_mask(&staging.join(&x_rel), conditioned.pixels())?;
        write_rgb(&staging.join(&f_rel), &frame)?;
        write_mask(&staging.join(&m_rel), &synth.mask)?;
        manifest.entries.push(DatasetEntry {
            id: e.id.clone(),
            image: f_rel,
            mask: Some(m_rel),
            conditioned: Some(x_rel),
            source: e.source.clone(),
            transforms: vec![format!("mask:{}", pool[synth.source_index].0)],
            params: Some(serde_json::json!({
                "mask_source": pool[synth.source_index].0,
                "attempts": synth.attempts,
                "transform": synth.params,
            })),
        });
    }
    manifest.write(&staging.join("manifest.json"))?;
    commit(&staging, &args.out)?;
    Ok(manifest)
}

fn read_conditioned(manifest: &Path, e: &DatasetEntry) -> Result<ConditionedImage> {
    let rel = e
        .conditioned
        .as_deref()
        .ok_or_else(|| Error::invalid("manifest entry", format!("{} has no conditioned image", e.id)))?;
    Ok(ConditionedImage::from_binary(read_mask(&resolve(manifest, rel))?))
}

/// Training pairs from every entry that carries a conditioned image.
pub fn load_pairs(manifest_path: &Path) -> Result<Vec<TrainingPair>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    manifest
        .entries
        .iter()
        .filter(|e| e.conditioned.is_some())
        .map(|e| {
            let x = read_conditioned(manifest_path, e)?;
            let y = read_rgb(&resolve(manifest_path, &e.image))?;
            TrainingPair::from_images(&x, &y)
        })
        .collect()
}

/// Architecture and optimization settings of one training run, stored next
/// to its checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    /// Desk-scale networks at the given extent.
    pub fn desk(extent: usize) -> Self {
        RunConfig {
            generator: GeneratorConfig { extent, ..GeneratorConfig::desk() },
            discriminator: DiscriminatorConfig { extent, ..DiscriminatorConfig::desk() },
            training: TrainingConfig::default(),
        }
    }
}

pub struct TrainArgs {
    pub pairs: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub first_l1: f64,
    pub last_l1: f64,
}

/// Trains on a pair manifest; writes `run.json`, `losses.csv`,
/// `checkpoints/` and `samples/`.
pub fn train(args: &TrainArgs) -> Result<TrainOutcome> {
    let pairs = load_pairs(&args.pairs)?;
    let cfg = &args.config;
    let seed = cfg.training.seed;
    let gen = Generator::new(cfg.generator.clone(), derive_seed(seed, "generator_init", 0))?;
    let disc = Discriminator::new(cfg.discriminator.clone(), derive_seed(seed, "discriminator_init", 0))?;
    let mut trainer = Trainer::new(gen, disc, cfg.training.clone())?;
    let staging = stage(&args.out)?;
    write_json(&staging.join("run.json"), cfg)?;
    let run = training::train(&mut trainer, &pairs, Some(&staging));
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            // keep the partial run for inspection
            commit(&staging, &args.out)?;
            return Err(e);
        }
    };
    commit(&staging, &args.out)?;
    let last = run.reports.last().copied();
    let rel = run
        .checkpoints
        .last()
        .and_then(|p| p.strip_prefix(&staging).ok())
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok(TrainOutcome {
        steps: last.map_or(0, |r| r.step),
        final_checkpoint: args.out.join(rel),
        first_l1: run.reports.first().map_or(f64::NAN, |r| r.l1_s1),
        last_l1: last.map_or(f64::NAN, |r| r.l1_s1),
    })
}

pub struct GenerateArgs {
    /// Generator checkpoint manifest written by `train`.
    pub checkpoint: PathBuf,
    /// Generator architecture; defaults to the `run.json` of the training run.
    pub arch: Option<PathBuf>,
    pub inputs: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub limit: Option<usize>,
}

/// The run directory that holds a checkpoint in `run/checkpoints/`.
fn run_dir_of(checkpoint: &Path) -> Option<&Path> {
    checkpoint.parent()?.parent()
}

pub fn load_generator(checkpoint: &Path, arch: Option<&Path>) -> Result<Generator> {
    let config = match arch {
        Some(p) => read_json::<GeneratorConfig>(p)?,
        None => {
            let run = run_dir_of(checkpoint)
                .map(|d| d.join("run.json"))
                .ok_or_else(|| Error::invalid("generator architecture", "no --arch and no run directory"))?;
            read_json::<RunConfig>(&run)?.generator
        }
    };
    let mut gen = Generator::new(config, 0)?;
    polypgan_tensor::load_checkpoint(checkpoint, gen.store_mut())?;
    Ok(gen)
}

/// Generates one image per conditioned input; writes images, copies of the
/// inputs and a manifest.
pub fn generate(args: &GenerateArgs) -> Result<DatasetManifest> {
    let gen = load_generator(&args.checkpoint, args.arch.as_deref())?;
    let inputs = DatasetManifest::read(&args.inputs)?;
    let staging = stage(&args.out)?;
    mkdirs(&staging, &["images", "conditioned"])?;
    let mut manifest = DatasetManifest::new(gen.config.extent, args.seed);
    let entries = inputs.entries.iter().filter(|e| e.conditioned.is_some());
    for (i, e) in entries.take(args.limit.unwrap_or(usize::MAX)).enumerate() {
        let x = read_conditioned(&args.inputs, e)?;
        let image = training::generate(&gen, &x, derive_seed(args.seed, "generate", i as u64))?;
        let (img_rel, x_rel) = (format!("images/{}.png", e.id), format!("conditioned/{}.png", e.id));
        write_rgb(&staging.join(&img_rel), &image)?;
        write_mask(&staging.join(&x_rel), x.pixels())?;
        let mask_rel = match &e.mask {
            Some(m) => {
                let rel = format!("masks/{}.png", e.id);
                fs::create_dir_all(staging.join("masks")).map_err(|err| Error::io(staging.join("masks"), err))?;
                write_mask(&staging.join(&rel), &read_mask(&resolve(&args.inputs, m))?)?;
                Some(rel)
            }
            None => None,
        };
        manifest.entries.push(DatasetEntry {
            id: e.id.clone(),
            image: img_rel,
            mask: mask_rel,
            conditioned: Some(x_rel),
            source: e.source.clone(),
            transforms: vec!["generated".to_string()],
            params: Some(serde_json::json!({ "noise_seed": derive_seed(args.seed, "generate", i as u64) })),
        });
    }
    manifest.write(&staging.join("manifest.json"))?;
    commit(&staging, &args.out)?;
    Ok(manifest)
}

pub struct EvalArgs {
    pub detections: PathBuf,
    pub ground_truth: PathBuf,
    pub out: PathBuf,
    pub options: ScoringOptions,
}

pub fn eval(args: &EvalArgs) -> Result<Summary> {
    let dets = detection::read_detections(&args.detections)?;
    let gts = detection::read_ground_truth(&args.ground_truth)?;
    let evaluation = detection::evaluate(&dets, &gts, &args.options)?;
    let staging = stage(&args.out)?;
    let summary = detection::write_report(&staging, &evaluation)?;
    commit(&staging, &args.out)?;
    Ok(summary)
}

pub struct DetectArgs {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub threshold: u8,
    pub min_area: usize,
}

/// Runs the toy bright-blob detector over every image of a manifest and
/// writes `detections.csv` plus a matching `ground_truth.json`.
pub fn detect(args: &DetectArgs) -> Result<usize> {
    let manifest = DatasetManifest::read(&args.manifest)?;
    let staging = stage(&args.out)?;
    mkdirs(&staging, &["masks"])?;
    let mut dets = Vec::new();
    let mut gt = std::collections::BTreeMap::new();
    for e in &manifest.entries {
        let gray = read_gray(&resolve(&args.manifest, &e.image))?;
        dets.extend(detection::toy_detect(&e.id, &gray, args.threshold, args.min_area));
        let rel = match &e.mask {
            Some(m) => {
                let rel = format!("masks/{}.png", e.id);
                write_mask(&staging.join(&rel), &read_mask(&resolve(&args.manifest, m))?)?;
                rel
            }
            None => String::new(),
        };
        gt.insert(e.id.clone(), rel);
    }
    detection::write_detections(&staging.join("detections.csv"), &dets)?;
    write_json(&staging.join("ground_truth.json"), &gt)?;
    commit(&staging, &args.out)?;
    Ok(dets.len())
}

pub struct AnalyzeArgs {
    pub arch: GeneratorConfig,
    pub out: PathBuf,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckerboardResult {
    pub upsampling: Upsampling,
    pub metric: f64,
    pub border: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub generator_params: usize,
    pub baseline_params: usize,
    /// Generator count over baseline count.
    pub ratio: f64,
    /// One minus the ratio.
    pub reduction: f64,
    pub generator_bottleneck: usize,
    pub baseline_stages: usize,
    pub receptive_field: Vec<usize>,
    pub checkerboard: Vec<CheckerboardResult>,
    pub trials: usize,
}

/// The reference U-net matched to a generator's extent, widths and channels.
pub fn matched_baseline(arch: &GeneratorConfig) -> BaselineConfig {
    BaselineConfig {
        extent: arch.extent,
        in_channels: arch.in_channels,
        out_channels: arch.out_channels,
        base_width: arch.base_width,
        max_width: arch.max_width,
        dropout: arch.dropout,
        elu_alpha: arch.elu_alpha,
        norm_eps: arch.norm_eps,
        ..BaselineConfig::default()
    }
}

/// Parameter breakdowns for the generator and its matched baseline, their
/// ratio, receptive fields and checkerboard metrics for both upsampling modes.
pub fn analyze(args: &AnalyzeArgs) -> Result<Analysis> {
    let gen = Generator::new(args.arch.clone(), derive_seed(args.seed, "analyze", 0))?;
    let base_cfg = matched_baseline(&args.arch);
    let baseline = BaselineUnet::new(base_cfg.clone(), derive_seed(args.seed, "analyze", 1))?;
    let (g_report, b_report) = (count_params(&gen), count_params(&baseline));
    let mut checkerboard = Vec::new();
    for mode in [Upsampling::ResizeConv, Upsampling::TransposedConv] {
        let cfg = GeneratorConfig {
            upsampling: mode,
            ..args.arch.clone()
        };
        checkerboard.push(CheckerboardResult {
            upsampling: mode,
            metric: checkerboard_metric(&cfg, args.trials, args.seed)?,
            border: decoder_border(cfg.blocks),
        });
    }
    let ratio = g_report.total as f64 / b_report.total as f64;
    let analysis = Analysis {
        generator_params: g_report.total,
        baseline_params: b_report.total,
        ratio,
        reduction: 1.0 - ratio,
        generator_bottleneck: args.arch.bottleneck_extent(),
        baseline_stages: base_cfg.stages(),
        receptive_field: receptive_field(&args.arch)?,
        checkerboard,
        trials: args.trials,
    };
    let staging = stage(&args.out)?;
    g_report.write_csv(&staging.join("generator_params.csv"))?;
    b_report.write_csv(&staging.join("baseline_params.csv"))?;
    write_json(&staging.join("analysis.json"), &analysis)?;
    write_json(&staging.join("generator.json"), &args.arch)?;
    commit(&staging, &args.out)?;
    Ok(analysis)
}

/// Scoring options from a rule name: `center` or `iou`.
pub fn scoring_options(rule: &str, iou: f64, split_components: bool) -> Result<ScoringOptions> {
    let rule = match rule {
        "center" => ContainmentRule::Center,
        "iou" if iou > 0.0 && iou <= 1.0 => ContainmentRule::Iou(iou),
        "iou" => return Err(Error::invalid("iou threshold", format!("{iou} is outside (0, 1]"))),
        other => return Err(Error::invalid("containment rule", format!("unknown rule {other:?}"))),
    };
    Ok(ScoringOptions { rule, split_components })
}

/// Mean gray intensity inside a mask and the median gray intensity outside it.
pub fn mask_contrast(image: &RgbImage, mask: &BinaryMask) -> Result<(f64, f64)> {
    let gray = to_grayscale(image);
    let dims = (gray.width() as usize, gray.height() as usize);
    if dims != mask.dims() {
        return Err(Error::ExtentMismatch {
            op: "mask contrast",
            left: dims,
            right: mask.dims(),
        });
    }
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (&v, &m) in gray.as_raw().iter().zip(mask.data()) {
        if m != 0 { inside.push(v) } else { outside.push(v) }
    }
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::invalid("mask contrast", "mask must have pixels on both sides"));
    }
    let mean = inside.iter().map(|&v| v as f64).sum::<f64>() / inside.len() as f64;
    outside.sort_unstable();
    let n = outside.len();
    let median = if n % 2 == 1 {
        outside[n / 2] as f64
    } else {
        (outside[n / 2 - 1] as f64 + outside[n / 2] as f64) / 2.0
    };
    Ok((mean, median))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrast_of_a_bright_square() {
        let mask = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        let img = RgbImage::from_fn(4, 4, |x, y| {
            let v = if x < 2 && y < 2 { 200 } else { (10 * (x + y)) as u8 };
            image::Rgb([v, v, v])
        });
        // outside values sorted: 20 20 30 30 30 30 40 40 40 50 50 60
        let (inside, median) = mask_contrast(&img, &mask).unwrap();
        assert_eq!(inside, 200.0);
        assert_eq!(median, 35.0);
        assert!(mask_contrast(&img, &BinaryMask::new(4, 4)).is_err());
    }

    #[test]
    fn staging_refuses_foreign_directories() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        fs::create_dir(&out).unwrap();
        fs::write(out.join("keep.txt"), "x").unwrap();
        assert!(stage(&out).is_err());

        let ours = dir.path().join("ours");
        let s = stage(&ours).unwrap();
        fs::write(s.join("a.txt"), "1").unwrap();
        commit(&s, &ours).unwrap();
        let s = stage(&ours).unwrap();
        fs::write(s.join("b.txt"), "2").unwrap();
        commit(&s, &ours).unwrap();
        assert!(!ours.join("a.txt").exists() && ours.join("b.txt").exists());
        assert!(!staging_path(&ours).unwrap().exists());
    }
}
