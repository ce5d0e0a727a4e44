//! The binary driven as a user would: flags in, files and exit codes out.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use polypgan_core::detection::{write_counts_fixture, MetricCounts};
use polypgan_core::BinaryMask;
use serde_json::Value;

fn polypgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polypgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = polypgan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn entries(manifest: &Path) -> Vec<Value> {
    json(manifest)["entries"].as_array().unwrap().clone()
}

/// Relative path to file bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, polyp: usize, normal: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let (p, n, s) = (polyp.to_string(), normal.to_string(), seed.to_string());
    ok(&["synth-data", "--polyp", &p, "--normal", &n, "--size", "64", "--seed", &s, "--out", arg(&out)]);
    out
}

#[test]
fn synth_data_writes_requested_counts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 50, 10, 5);
    let list = entries(&a.join("manifest.json"));
    assert_eq!(list.len(), 60);
    let polyps = list.iter().filter(|e| e["mask"].is_string()).count();
    assert_eq!(polyps, 50);

    let b = dir.path().join("again");
    ok(&["synth-data", "--polyp", "50", "--normal", "10", "--size", "64", "--seed", "5", "--out", arg(&b)]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing_out = polypgan(&["synth-data", "--polyp", "1", "--normal", "1"]);
    assert_eq!(missing_out.status.code(), Some(2));
    let unknown = polypgan(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));

    let absent = dir.path().join("absent.json");
    let bad_input = polypgan(&["prepare", "--manifest", arg(&absent), "--out", arg(&dir.path().join("p"))]);
    assert_eq!(bad_input.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&bad_input.stderr).is_empty());
}

#[test]
fn foreign_output_directory_is_left_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("busy");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "mine").unwrap();
    let res = polypgan(&["synth-data", "--polyp", "1", "--normal", "1", "--out", arg(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(fs::read_to_string(out.join("keep.txt")).unwrap(), "mine");
}

#[test]
fn prepare_expands_each_frame_to_eighteen_binary_conditioned_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1, 1, 2);
    let pairs = dir.path().join("pairs");
    ok(&["prepare", "--manifest", arg(&data.join("manifest.json")), "--out", arg(&pairs)]);
    let list = entries(&pairs.join("manifest.json"));
    assert_eq!(list.len(), 18);
    for e in &list {
        let cond = image::open(pairs.join(e["conditioned"].as_str().unwrap())).unwrap().to_luma8();
        assert!(cond.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }

    let plain = dir.path().join("plain");
    ok(&["prepare", "--manifest", arg(&data.join("manifest.json")), "--out", arg(&plain), "--no-augment"]);
    assert_eq!(entries(&plain.join("manifest.json")).len(), 1);
}

#[test]
fn synth_masks_gives_one_input_per_normal_frame_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 3, 9);
    let m = data.join("manifest.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth-masks", "--manifest", arg(&m), "--out", arg(&a), "--seed", "4"]);
    ok(&["synth-masks", "--manifest", arg(&m), "--out", arg(&b), "--seed", "4"]);
    assert_eq!(entries(&a.join("manifest.json")).len(), 3);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn train_then_generate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6, 2, 1);
    let pairs = dir.path().join("pairs");
    ok(&["prepare", "--manifest", arg(&data.join("manifest.json")), "--out", arg(&pairs)]);
    let run = dir.path().join("run");
    ok(&["train", "--pairs", arg(&pairs.join("manifest.json")), "--out", arg(&run), "--steps", "200", "--seed", "3"]);

    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    let rows: Vec<&str> = losses.lines().skip(1).collect();
    assert_eq!(rows.len(), 200);
    for row in &rows {
        for v in row.split(',').skip(2) {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{row}");
        }
    }
    let ckpt = run.join("checkpoints/gen_final.json");
    assert!(ckpt.exists());

    let inputs = dir.path().join("inputs");
    ok(&["synth-masks", "--manifest", arg(&data.join("manifest.json")), "--out", arg(&inputs), "--seed", "2"]);
    let gen = dir.path().join("gen");
    ok(&["generate", "--checkpoint", arg(&ckpt), "--inputs", arg(&inputs.join("manifest.json")), "--out", arg(&gen)]);
    let list = entries(&gen.join("manifest.json"));
    assert_eq!(list.len(), 2);
    for e in &list {
        let img = image::open(gen.join(e["image"].as_str().unwrap())).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }
}

#[test]
fn training_divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1, 0, 3);
    let pairs = dir.path().join("pairs");
    ok(&["prepare", "--manifest", arg(&data.join("manifest.json")), "--out", arg(&pairs), "--no-augment"]);
    let config = dir.path().join("training.json");
    fs::write(&config, r#"{"adam": {"lr": 1e30}, "steps": 5}"#).unwrap();
    let res = polypgan(&[
        "train", "--pairs", arg(&pairs.join("manifest.json")), "--out", arg(&dir.path().join("run")),
        "--config", arg(&config),
    ]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn analyze_reports_both_counts_and_their_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("arch.json");
    fs::write(&arch, r#"{"extent": 64, "base_width": 8, "max_width": 32}"#).unwrap();
    let out = dir.path().join("analysis");
    ok(&["analyze", "--arch", arg(&arch), "--out", arg(&out), "--trials", "2"]);
    let a = json(&out.join("analysis.json"));
    let (g, b) = (a["generator_params"].as_f64().unwrap(), a["baseline_params"].as_f64().unwrap());
    assert!(g > 0.0 && b > g);
    assert!((a["ratio"].as_f64().unwrap() - g / b).abs() < 1e-9);

    let total = |file: &str| -> f64 {
        let csv = fs::read_to_string(out.join(file)).unwrap();
        let last = csv.lines().last().unwrap().to_string();
        assert!(last.starts_with("TOTAL,"));
        last.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert_eq!(total("generator_params.csv"), g);
    assert_eq!(total("baseline_params.csv"), b);
}

#[test]
fn eval_on_count_fixture_reproduces_rounded_rates() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("fixture");
    fs::create_dir_all(&fixture).unwrap();
    let mask = BinaryMask::from_fn(16, 16, |x, y| (4..12).contains(&x) && (4..12).contains(&y));
    write_counts_fixture(&fixture, &MetricCounts::new(6760, 2981, 3265, 962), &mask).unwrap();
    let out = dir.path().join("eval");
    ok(&[
        "eval", "--detections", arg(&fixture.join("detections.csv")),
        "--ground-truth", arg(&fixture.join("ground_truth.json")), "--out", arg(&out),
    ]);
    let s = json(&out.join("summary.json"));
    assert_eq!((s["tp"].as_u64(), s["fp"].as_u64(), s["fn"].as_u64(), s["tn"].as_u64()),
               (Some(6760), Some(2981), Some(3265), Some(962)));
    assert_eq!((s["precision"].as_f64(), s["recall"].as_f64()), (Some(69.4), Some(67.4)));
}
