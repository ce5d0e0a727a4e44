//! Detection outcome counting and precision/recall.
//!
//! A positive frame contributes exactly one TP or one FN per polyp. Detections
//! that hit no polyp are FPs; extra hits on an already-found polyp count as
//! nothing. A negative frame contributes one TN if it has no detections and
//! one FP per detection otherwise.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::mask::BinaryMask;

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn is_ordered(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min + 1.0) * (self.y_max - self.y_min + 1.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min) + 1.0;
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min) + 1.0;
        if w <= 0.0 || h <= 0.0 {
            return 0.0;
        }
        let inter = w * h;
        inter / (self.area() + other.area() - inter)
    }
}

/// Tight box around the on-pixels, `None` for an empty mask.
pub fn mask_to_bbox(mask: &BinaryMask) -> Option<BoundingBox> {
    mask.bounds().map(|b| BoundingBox {
        x_min: b.x_min as f64,
        x_max: b.x_max as f64,
        y_min: b.y_min as f64,
        y_max: b.y_max as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(frame_id: impl Into<String>, bbox: BoundingBox, score: f64) -> Self {
        DetectionRecord {
            frame_id: frame_id.into(),
            x_min: bbox.x_min,
            x_max: bbox.x_max,
            y_min: bbox.y_min,
            y_max: bbox.y_max,
            score,
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroundTruth {
    pub frame_id: String,
    /// `None` or an empty mask marks a negative frame.
    pub mask: Option<BinaryMask>,
}

impl FrameGroundTruth {
    pub fn positive(frame_id: impl Into<String>, mask: BinaryMask) -> Self {
        FrameGroundTruth {
            frame_id: frame_id.into(),
            mask: Some(mask),
        }
    }

    pub fn negative(frame_id: impl Into<String>) -> Self {
        FrameGroundTruth {
            frame_id: frame_id.into(),
            mask: None,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| !m.is_empty())
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        self.mask.as_ref().and_then(mask_to_bbox)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl MetricCounts {
    pub const fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        MetricCounts { tp, fp, fn_, tn }
    }
}

impl Add for MetricCounts {
    type Output = MetricCounts;

    fn add(self, o: MetricCounts) -> MetricCounts {
        MetricCounts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for MetricCounts {
    fn add_assign(&mut self, o: MetricCounts) {
        *self = *self + o;
    }
}

impl Sum for MetricCounts {
    fn sum<I: Iterator<Item = MetricCounts>>(iter: I) -> Self {
        iter.fold(MetricCounts::default(), Add::add)
    }
}

/// When a detection counts as finding a polyp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ContainmentRule {
    /// Rounded box centre lies on a mask pixel.
    Center,
    /// Box IoU with the polyp's tight box reaches the threshold.
    Iou(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    pub rule: ContainmentRule,
    /// Treat each 8-connected mask component as its own polyp.
    pub split_components: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            rule: ContainmentRule::Center,
            split_components: false,
        }
    }
}

fn hits(det: &DetectionRecord, polyp: &BinaryMask, rule: ContainmentRule) -> bool {
    match rule {
        ContainmentRule::Center => {
            let (cx, cy) = det.bbox().center();
            polyp.get_signed(cx.round() as isize, cy.round() as isize)
        }
        ContainmentRule::Iou(t) => mask_to_bbox(polyp).is_some_and(|b| det.bbox().iou(&b) >= t),
    }
}

fn check_box(det: &DetectionRecord, extent: Option<(usize, usize)>) -> Result<()> {
    let b = det.bbox();
    let finite = [b.x_min, b.x_max, b.y_min, b.y_max, det.score].iter().all(|v| v.is_finite());
    if !finite || !b.is_ordered() {
        return Err(Error::invalid("detection", format!("malformed box in frame {}", det.frame_id)));
    }
    if let Some((w, h)) = extent {
        if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > (w - 1) as f64 || b.y_max > (h - 1) as f64 {
            return Err(Error::invalid(
                "detection",
                format!("box {b:?} leaves the {w}x{h} frame {}", det.frame_id),
            ));
        }
    }
    Ok(())
}

/// Counts for one frame.
pub fn score_frame(dets: &[DetectionRecord], gt: &FrameGroundTruth, opts: &ScoringOptions) -> Result<MetricCounts> {
    let extent = gt.mask.as_ref().map(|m| m.dims());
    for d in dets {
        if d.frame_id != gt.frame_id {
            return Err(Error::invalid(
                "detection",
                format!("frame {} scored against ground truth {}", d.frame_id, gt.frame_id),
            ));
        }
        check_box(d, extent)?;
    }
    let mut c = MetricCounts::default();
    let mask = match &gt.mask {
        Some(m) if !m.is_empty() => m,
        _ => {
            if dets.is_empty() {
                c.tn = 1;
            } else {
                c.fp = dets.len() as u64;
            }
            return Ok(c);
        }
    };
    let polyps = if opts.split_components {
        mask.components()
    } else {
        vec![mask.clone()]
    };
    let mut found = vec![false; polyps.len()];
    for d in dets {
        let mut any = false;
        for (i, p) in polyps.iter().enumerate() {
            if hits(d, p, opts.rule) {
                found[i] = true;
                any = true;
            }
        }
        if !any {
            c.fp += 1;
        }
    }
    c.tp = found.iter().filter(|&&f| f).count() as u64;
    c.fn_ = polyps.len() as u64 - c.tp;
    Ok(c)
}

/// `(precision, recall)` as fractions; `None` where the denominator is zero.
pub fn precision_recall(c: &MetricCounts) -> (Option<f64>, Option<f64>) {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Fraction to a percentage with one decimal, halves away from zero.
pub fn percent_1dp(fraction: f64) -> f64 {
    (fraction * 1000.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub counts: MetricCounts,
    /// Sorted by frame id.
    pub per_frame: Vec<(String, MetricCounts)>,
}

/// Scores every ground-truth frame; detections naming unknown frames are rejected.
pub fn evaluate(dets: &[DetectionRecord], gts: &[FrameGroundTruth], opts: &ScoringOptions) -> Result<Evaluation> {
    let mut by_frame: HashMap<&str, Vec<DetectionRecord>> = HashMap::new();
    for gt in gts {
        if by_frame.insert(&gt.frame_id, Vec::new()).is_some() {
            return Err(Error::invalid("ground truth", format!("frame {} listed twice", gt.frame_id)));
        }
    }
    for d in dets {
        by_frame
            .get_mut(d.frame_id.as_str())
            .ok_or_else(|| Error::invalid("detection", format!("unknown frame {}", d.frame_id)))?
            .push(d.clone());
    }
    let mut per_frame = BTreeMap::new();
    for gt in gts {
        per_frame.insert(gt.frame_id.clone(), score_frame(&by_frame[gt.frame_id.as_str()], gt, opts)?);
    }
    Ok(Evaluation {
        counts: per_frame.values().copied().sum(),
        per_frame: per_frame.into_iter().collect(),
    })
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e)))
        .collect()
}

pub fn write_detections(path: &Path, dets: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for d in dets {
        w.serialize(d).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON object of frame id to mask path (relative to the manifest;
/// empty string for a negative frame). Masks shared between frames load once.
pub fn read_ground_truth(path: &Path) -> Result<Vec<FrameGroundTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cache: HashMap<PathBuf, BinaryMask> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for (frame_id, mask_path) in entries {
        if mask_path.is_empty() {
            out.push(FrameGroundTruth::negative(frame_id));
            continue;
        }
        let full = base.join(&mask_path);
        let mask = match cache.get(&full) {
            Some(m) => m.clone(),
            None => {
                let m = imageio::read_mask(&full)?;
                cache.insert(full, m.clone());
                m
            }
        };
        out.push(FrameGroundTruth::positive(frame_id, mask));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// Percent, one decimal.
    pub precision: Option<f64>,
    /// Percent, one decimal.
    pub recall: Option<f64>,
}

impl From<&MetricCounts> for Summary {
    fn from(c: &MetricCounts) -> Self {
        let (p, r) = precision_recall(c);
        Summary {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            precision: p.map(percent_1dp),
            recall: r.map(percent_1dp),
        }
    }
}

/// Writes `report.csv` (per-frame rows plus a `TOTAL` row) and `summary.json`.
pub fn write_report(dir: &Path, eval: &Evaluation) -> Result<Summary> {
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e))?;
    w.write_record(["frame_id", "tp", "fp", "fn", "tn"])
        .map_err(|e| Error::format(&csv_path, e))?;
    let total = ("TOTAL".to_string(), eval.counts);
    for (id, c) in eval.per_frame.iter().chain(std::iter::once(&total)) {
        w.write_record([id.clone(), c.tp.to_string(), c.fp.to_string(), c.fn_.to_string(), c.tn.to_string()])
            .map_err(|e| Error::format(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let summary = Summary::from(&eval.counts);
    let json_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::format(&json_path, e))?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}

/// Frames whose scoring yields exactly `counts`: one centred hit per TP
/// frame, an undetected positive per FN, a negative frame with one detection
/// per FP and an empty negative per TN. All positives share one mask.
pub fn counts_fixture(counts: &MetricCounts, mask: &BinaryMask) -> Result<(Vec<DetectionRecord>, Vec<FrameGroundTruth>)> {
    let b = mask_to_bbox(mask).ok_or_else(|| Error::invalid("fixture mask", "mask is empty"))?;
    let (cx, cy) = b.center();
    if !mask.get(cx.round() as usize, cy.round() as usize) {
        return Err(Error::invalid("fixture mask", "box centre is off the mask"));
    }
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut next = 0u64;
    let mut frame = || {
        next += 1;
        format!("f{next:06}")
    };
    for _ in 0..counts.tp {
        let id = frame();
        dets.push(DetectionRecord::new(id.clone(), b, 0.9));
        gts.push(FrameGroundTruth::positive(id, mask.clone()));
    }
    for _ in 0..counts.fn_ {
        gts.push(FrameGroundTruth::positive(frame(), mask.clone()));
    }
    for _ in 0..counts.fp {
        let id = frame();
        dets.push(DetectionRecord::new(id.clone(), b, 0.6));
        gts.push(FrameGroundTruth::negative(id));
    }
    for _ in 0..counts.tn {
        gts.push(FrameGroundTruth::negative(frame()));
    }
    Ok((dets, gts))
}

/// Writes a [`counts_fixture`] as `mask.png`, `ground_truth.json` and `detections.csv`.
pub fn write_counts_fixture(dir: &Path, counts: &MetricCounts, mask: &BinaryMask) -> Result<()> {
    let (dets, gts) = counts_fixture(counts, mask)?;
    imageio::write_mask(&dir.join("mask.png"), mask)?;
    let manifest: BTreeMap<&str, &str> = gts
        .iter()
        .map(|g| (g.frame_id.as_str(), if g.is_positive() { "mask.png" } else { "" }))
        .collect();
    let gt_path = dir.join("ground_truth.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&gt_path, e))?;
    fs::write(&gt_path, json).map_err(|e| Error::io(&gt_path, e))?;
    write_detections(&dir.join("detections.csv"), &dets)
}

/// Threshold, label 8-connected blobs, one box per blob of at least `min_area`
/// pixels; score is the blob's mean intensity over 255.
pub fn toy_detect(frame_id: &str, image: &GrayImage, threshold: u8, min_area: usize) -> Vec<DetectionRecord> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    let bright = BinaryMask::from_fn(w, h, |x, y| raw[y * w + x] > threshold);
    let (labels, count) = bright.label_components();
    let mut sums = vec![(0usize, 0u64); count];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            sums[l as usize - 1].0 += 1;
            sums[l as usize - 1].1 += raw[i] as u64;
        }
    }
    bright
        .components()
        .into_iter()
        .zip(sums)
        .filter(|(_, (area, _))| *area >= min_area)
        .map(|(blob, (area, total))| {
            let b = mask_to_bbox(&blob).expect("components are non-empty");
            DetectionRecord::new(frame_id, b, total as f64 / area as f64 / 255.0)
        })
        .collect()
}
