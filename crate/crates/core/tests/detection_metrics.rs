//! Published count rows, counting-rule properties and file round trips.

use polypgan_core::detection::{
    evaluate, percent_1dp, precision_recall, read_detections, read_ground_truth, score_frame,
    write_counts_fixture, write_report, BoundingBox, DetectionRecord, FrameGroundTruth, MetricCounts,
    ScoringOptions,
};
use polypgan_core::BinaryMask;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pct(c: MetricCounts) -> (f64, f64) {
    let (p, r) = precision_recall(&c);
    (percent_1dp(p.unwrap()), percent_1dp(r.unwrap()))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 0.05 + 1e-9
}

#[test]
fn published_rows_reproduce() {
    // (tp, fp, fn, tn, printed precision, printed recall)
    let rows = [
        (6760, 2981, 3265, 962, 69.4, 67.4),
        (6113, 2981, 3912, 1143, 67.2, 61.0),
        (7517, 1995, 2508, 1013, 79.0, 75.0),
        (6831, 1177, 3194, 1399, 85.3, 68.1),
    ];
    for (tp, fp, fn_, tn, p, r) in rows {
        let (cp, cr) = pct(MetricCounts::new(tp, fp, fn_, tn));
        assert!(close(cp, p) && close(cr, r), "row tp={tp}: got {cp}/{cr}, printed {p}/{r}");
    }
}

/// The printed 48 disagrees with 4308 / 10025 = 0.4297; precision matches.
#[test]
fn first_table_original_recall_is_flagged() {
    let (p, r) = pct(MetricCounts::new(4308, 2962, 5717, 1365));
    assert_eq!(p, 59.3);
    assert_eq!(r, 43.0);
    assert!(!close(r, 48.0));
}

/// 6011 / 7344 = 0.81849 rounds to 81.8, one step below the printed 81.9;
/// recall 60.0 matches.
#[test]
fn second_table_aug_ii_original_precision_is_flagged() {
    let (p, r) = pct(MetricCounts::new(6011, 1333, 4014, 1496));
    assert_eq!(p, 81.8);
    assert_eq!(r, 60.0);
    assert!(!close(p, 81.9));
}

/// Every positive frame in the published rows contributes TP or FN.
#[test]
fn published_positive_frame_counts_agree() {
    for (tp, fn_) in [(4308u64, 5717u64), (6760, 3265), (6113, 3912), (7517, 2508), (6011, 4014), (6831, 3194)] {
        assert_eq!(tp + fn_, 10025);
    }
}

fn disk(w: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(w, w, |x, y| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
}

#[test]
fn files_reproduce_combined_row() {
    let dir = tempfile::tempdir().unwrap();
    let counts = MetricCounts::new(6760, 2981, 3265, 962);
    write_counts_fixture(dir.path(), &counts, &disk(16, 8.0, 8.0, 4.0)).unwrap();
    let gts = read_ground_truth(&dir.path().join("ground_truth.json")).unwrap();
    let dets = read_detections(&dir.path().join("detections.csv")).unwrap();
    let eval = evaluate(&dets, &gts, &ScoringOptions::default()).unwrap();
    assert_eq!(eval.counts, counts);
    let summary = write_report(dir.path(), &eval).unwrap();
    assert_eq!((summary.precision, summary.recall), (Some(69.4), Some(67.4)));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["fn"], 3265);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("TOTAL,6760,2981,3265,962"));
}

/// Random frames: disks at random places, detections scattered in and out.
fn random_frames(seed: u64, n: usize) -> (Vec<DetectionRecord>, Vec<FrameGroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for i in 0..n {
        let id = format!("frame{i:03}");
        let positive = rng.gen_bool(0.7);
        let gt = if positive {
            let (cx, cy) = (rng.gen_range(6.0..18.0), rng.gen_range(6.0..18.0));
            FrameGroundTruth::positive(id.clone(), disk(24, cx, cy, rng.gen_range(2.0..5.0)))
        } else {
            FrameGroundTruth::negative(id.clone())
        };
        for _ in 0..rng.gen_range(0..4) {
            let (x, y) = (rng.gen_range(0.0..20.0f64).floor(), rng.gen_range(0.0..20.0f64).floor());
            let b = BoundingBox { x_min: x, x_max: x + rng.gen_range(0.0..3.0f64).floor(), y_min: y, y_max: y + 3.0 };
            dets.push(DetectionRecord::new(id.clone(), b, rng.gen()));
        }
        gts.push(gt);
    }
    (dets, gts)
}

/// Independent re-scan: per frame, list which detections land on a mask pixel.
fn brute_force(dets: &[DetectionRecord], gts: &[FrameGroundTruth]) -> MetricCounts {
    let mut c = MetricCounts::default();
    for gt in gts {
        let mine: Vec<&DetectionRecord> = dets.iter().filter(|d| d.frame_id == gt.frame_id).collect();
        let on_mask: Vec<bool> = mine
            .iter()
            .map(|d| {
                let cx = ((d.x_min + d.x_max) / 2.0).round() as usize;
                let cy = ((d.y_min + d.y_max) / 2.0).round() as usize;
                gt.mask.as_ref().is_some_and(|m| m.on_pixels().any(|p| p == (cx, cy)))
            })
            .collect();
        if gt.is_positive() {
            if on_mask.contains(&true) {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
            c.fp += on_mask.iter().filter(|&&h| !h).count() as u64;
        } else if mine.is_empty() {
            c.tn += 1;
        } else {
            c.fp += mine.len() as u64;
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregate_matches_rescan_and_frame_count(seed in any::<u64>(), n in 1usize..40) {
        let (dets, gts) = random_frames(seed, n);
        let eval = evaluate(&dets, &gts, &ScoringOptions::default()).unwrap();
        prop_assert_eq!(eval.counts, brute_force(&dets, &gts));
        let positives = gts.iter().filter(|g| g.is_positive()).count() as u64;
        prop_assert_eq!(eval.counts.tp + eval.counts.fn_, positives);
        prop_assert!(eval.counts.tn + positives <= n as u64);
        let (p, r) = precision_recall(&eval.counts);
        for v in [p, r].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn order_and_partition_independent(seed in any::<u64>(), n in 2usize..40, cut in 1usize..39) {
        let (mut dets, mut gts) = random_frames(seed, n);
        let opts = ScoringOptions::default();
        let base = evaluate(&dets, &gts, &opts).unwrap().counts;

        let cut = cut.min(n - 1);
        let (left, right) = gts.split_at(cut);
        let in_left = |d: &&DetectionRecord| left.iter().any(|g| g.frame_id == d.frame_id);
        let dl: Vec<_> = dets.iter().filter(in_left).cloned().collect();
        let dr: Vec<_> = dets.iter().filter(|d| !in_left(d)).cloned().collect();
        let parts = evaluate(&dl, left, &opts).unwrap().counts + evaluate(&dr, right, &opts).unwrap().counts;
        prop_assert_eq!(parts, base);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        dets.shuffle(&mut rng);
        gts.shuffle(&mut rng);
        prop_assert_eq!(evaluate(&dets, &gts, &opts).unwrap().counts, base);
    }

    #[test]
    fn surplus_hits_change_nothing(seed in any::<u64>(), extra in 1usize..5) {
        let (_, gts) = random_frames(seed, 12);
        let opts = ScoringOptions::default();
        for gt in gts.iter().filter(|g| g.is_positive()) {
            let m = gt.mask.as_ref().unwrap();
            let (x, y) = m.on_pixels().next().unwrap();
            let hit = DetectionRecord::new(
                gt.frame_id.clone(),
                BoundingBox { x_min: x as f64, x_max: x as f64, y_min: y as f64, y_max: y as f64 },
                0.9,
            );
            let once = score_frame(std::slice::from_ref(&hit), gt, &opts).unwrap();
            let many = score_frame(&vec![hit; 1 + extra], gt, &opts).unwrap();
            prop_assert_eq!(once, many);
            prop_assert_eq!(once, MetricCounts::new(1, 0, 0, 0));
        }
    }
}
