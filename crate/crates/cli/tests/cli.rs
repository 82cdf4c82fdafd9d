use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use caliper_core::dataset::{load_manifest, per_rater};
use caliper_core::evaluation::EvaluationReport;
use caliper_core::pipeline::{save_predictions, PredictionRecord, PREDICTION_SCHEMA_VERSION};
use caliper_core::Raster;
use serde_json::Value;

fn caliper(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caliper"))
        .args(args)
        .env_remove("CALIPER_STORE")
        .output()
        .expect("spawn caliper")
}

fn ok(args: &[&str]) -> String {
    let out = caliper(args);
    assert!(
        out.status.success(),
        "caliper {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small network so two epochs take seconds.
fn write_small_config(path: &Path) {
    std::fs::write(path, r#"{"input_height": 80, "input_width": 144, "depth": 3, "base_channels": 4}"#).unwrap();
}

fn pipeline(root: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let data = root.join("data");
    let config = root.join("config.json");
    write_small_config(&config);
    ok(&["phantom-gen", "--n", "12", "--test", "4", "--seed", "5", "--out", s(&data), "--raters", "2"]);
    let manifest = data.join("manifest.jsonl");
    let ckpt = root.join("model.ckpt");
    ok(&["train", "--manifest", s(&manifest), "--plane", "TC", "--config", s(&config), "--epochs", "2", "--seed", "3", "--out", s(&ckpt)]);
    let pred = root.join("pred.jsonl");
    ok(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&pred)]);
    let report = root.join("report.json");
    ok(&["eval", "--pred", s(&pred), "--manifest", s(&manifest), "--policy", "per_rater_mean", "--out", s(&report)]);
    (
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&pred).unwrap(),
        std::fs::read(&report).unwrap(),
    )
}

#[test]
fn pipeline_runs_and_is_bit_identical_on_rerun() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let report = EvaluationReport::from_json(std::str::from_utf8(&first.2).unwrap()).unwrap();
    report.validate().unwrap();
    assert_eq!(report.n_images + report.missing_predictions.len(), 16);
    let second = pipeline(b.path());
    assert!(first.0 == second.0, "checkpoints differ");
    assert!(first.1 == second.1, "predictions differ");
    assert!(first.2 == second.2, "reports differ");
}

#[test]
fn no_bcs_logs_the_constraint_term_as_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let config = dir.path().join("c.json");
    write_small_config(&config);
    ok(&["phantom-gen", "--n", "4", "--seed", "1", "--out", s(&data)]);
    let ckpt = dir.path().join("m.ckpt");
    let log = ok(&[
        "train", "--manifest", s(&data.join("manifest.jsonl")), "--config", s(&config), "--epochs", "1", "--no-bcs", "--no-da",
        "--out", s(&ckpt),
    ]);
    let epoch: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(epoch["l_bcs"], "excluded");
    assert_eq!(epoch["alpha"], 0.0);

    let with = ok(&["train", "--manifest", s(&data.join("manifest.jsonl")), "--config", s(&config), "--epochs", "1", "--out", s(&ckpt)]);
    let epoch: Value = serde_json::from_str(with.lines().next().unwrap()).unwrap();
    assert!(epoch["l_bcs"].as_f64().unwrap() > 0.0);
    assert_eq!(epoch["alpha"], 1e-3);
}

#[test]
fn eval_of_consensus_predictions_equals_mean_rater_distance_to_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["phantom-gen", "--n", "6", "--seed", "9", "--out", s(&data), "--raters", "4"]);
    let manifest = load_manifest(&data.join("manifest.jsonl")).unwrap().manifest;

    // Oracle straight from the stored annotations.
    let mut records = Vec::new();
    let mut distances = Vec::new();
    for e in &manifest.entries {
        let raters = per_rater(e).unwrap();
        let mut centre: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for set in raters.values() {
            for (k, p) in set.points() {
                let c = centre.entry(k.clone()).or_default();
                c.0 += p.x / raters.len() as f64;
                c.1 += p.y / raters.len() as f64;
            }
        }
        for set in raters.values() {
            for (k, p) in set.points() {
                let c = centre[k];
                let dx = (p.x - c.0) * e.spacing.mm_per_px_x();
                let dy = (p.y - c.1) * e.spacing.mm_per_px_y();
                distances.push((dx * dx + dy * dy).sqrt());
            }
        }
        records.push(PredictionRecord {
            schema_version: PREDICTION_SCHEMA_VERSION,
            subject_id: e.subject_id.clone(),
            plane: e.plane.clone(),
            landmarks: centre.iter().map(|(k, c)| (k.clone(), caliper_core::CaliperPoint::new(c.0, c.1))).collect(),
            confidences: BTreeMap::new(),
            biometry_mm: BTreeMap::new(),
            failures: BTreeMap::new(),
        });
    }
    let expected = distances.iter().sum::<f64>() / distances.len() as f64;
    let pred = dir.path().join("p.jsonl");
    save_predictions(&records, &pred).unwrap();
    let out = ok(&["eval", "--pred", s(&pred), "--manifest", s(&data.join("manifest.jsonl")), "--policy", "per_rater_mean"]);
    let report = EvaluationReport::from_json(&out).unwrap();
    let pooled = report.pooled_caliper_mae_mm.unwrap().mean;
    assert!((pooled - expected).abs() < 1e-9, "{pooled} vs {expected}");
    assert!(expected > 0.0);
}

#[test]
fn augment_preview_writes_a_four_by_two_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["phantom-gen", "--n", "2", "--seed", "2", "--out", s(&data)]);
    let manifest = load_manifest(&data.join("manifest.jsonl")).unwrap().manifest;
    let entry = &manifest.entries[0];
    let image = manifest.image_path(entry);
    let grid = dir.path().join("grid.png");
    ok(&[
        "augment-preview", "--image", s(&image), "--seed", "4", "--out", s(&grid), "--manifest", s(&data.join("manifest.jsonl")),
        "--subject", &entry.subject_id,
    ]);
    let g = Raster::load_png(&grid).unwrap();
    let (w, h) = (entry.width, entry.height);
    assert_eq!((g.width(), g.height()), (4 * w + 12, 2 * h + 4));
    let original = Raster::load_png(&image).unwrap();
    for i in 0..8 {
        let (ox, oy) = ((i % 4) * (w + 4), (i / 4) * (h + 4));
        let changed = (0..h).any(|y| (0..w).any(|x| (g.get(ox + x, oy + y) - original.get(x, y)).abs() > 2.0 / 255.0));
        assert!(changed, "panel {i} equals the input");
    }
    let again = dir.path().join("grid2.png");
    ok(&["augment-preview", "--image", s(&image), "--seed", "4", "--out", s(&again)]);
    assert_eq!(Raster::load_png(&again).unwrap().width(), g.width());
}

#[test]
fn errors_are_json_records_with_sysexits_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = caliper(&["infer", "--checkpoint", s(&missing), "--manifest", s(&missing), "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(66));
    let record: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "io");
    assert_eq!(record["exit_code"], 66);

    let out = caliper(&["phantom-gen", "--n", "4", "--seed", "1", "--out", s(dir.path()), "--split", "8-2"]);
    assert_eq!(out.status.code(), Some(64));
    let record: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "usage");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"learning_rate": "fast"}"#).unwrap();
    ok(&["phantom-gen", "--n", "4", "--seed", "1", "--out", s(&dir.path().join("d"))]);
    let out = caliper(&[
        "train", "--manifest", s(&dir.path().join("d/manifest.jsonl")), "--config", s(&bad), "--out", s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(65));
    let record: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "config");
}
