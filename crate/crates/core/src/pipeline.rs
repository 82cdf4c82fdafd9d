//! End-to-end helpers shared by the command line and the experiments:
//! prediction files, manifest-wide inference and the four-run ablation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentFlags;
use crate::checkpoint::Checkpoint;
use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::error::{CaliperError, Result};
use crate::evaluation::{ablation_report, evaluate, AblationTable, EvalOptions, EvaluationReport};
use crate::geometry::{CaliperPoint, LandmarkSet, PlaneConfig};
use crate::training::{infer, train, EpochMetrics, TrainConfig, TrainingData};

pub const PREDICTION_SCHEMA_VERSION: u32 = 1;

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub schema_version: u32,
    pub subject_id: String,
    pub plane: String,
    pub landmarks: BTreeMap<String, CaliperPoint>,
    pub confidences: BTreeMap<String, f64>,
    pub biometry_mm: BTreeMap<String, f64>,
    #[serde(default)]
    pub failures: BTreeMap<String, String>,
}

impl PredictionRecord {
    /// The complete landmark set, or `None` when some landmark failed to decode.
    pub fn landmark_set(&self) -> Result<Option<LandmarkSet>> {
        let plane = PlaneConfig::by_name(&self.plane)?;
        if self.landmarks.len() != plane.landmark_count() {
            return Ok(None);
        }
        LandmarkSet::new(plane, self.landmarks.clone()).map(Some)
    }
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CaliperError::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CaliperError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: PredictionRecord =
                serde_json::from_str(l).map_err(|e| CaliperError::Manifest(format!("predictions line {}: {e}", i + 1)))?;
            if r.schema_version != PREDICTION_SCHEMA_VERSION {
                return Err(CaliperError::Manifest(format!("predictions line {}: schema version {}", i + 1, r.schema_version)));
            }
            Ok(r)
        })
        .collect()
}

/// Complete predictions keyed by subject; incomplete ones are left out so
/// evaluation lists them as missing.
pub fn prediction_sets(records: &[PredictionRecord]) -> Result<BTreeMap<String, LandmarkSet>> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(s) = r.landmark_set()? {
            out.insert(r.subject_id.clone(), s);
        }
    }
    Ok(out)
}

pub fn predict_entries(checkpoint: &Checkpoint, manifest: &Manifest, entries: &[&ManifestEntry]) -> Result<Vec<PredictionRecord>> {
    entries
        .iter()
        .map(|e| {
            let plane = e.plane_config()?;
            let image = manifest.load_image(e)?;
            let inf = infer(checkpoint, &image, e.spacing, &plane)?;
            Ok(PredictionRecord {
                schema_version: PREDICTION_SCHEMA_VERSION,
                subject_id: e.subject_id.clone(),
                plane: inf.plane,
                landmarks: inf.landmarks,
                confidences: inf.confidences,
                biometry_mm: inf.biometry_mm,
                failures: inf.failures,
            })
        })
        .collect()
}

/// Entries of `split`, or every entry when `split` is `None`.
pub fn select(manifest: &Manifest, split: Option<Split>) -> Vec<&ManifestEntry> {
    manifest
        .entries
        .iter()
        .filter(|e| split.map_or(true, |s| e.split == s))
        .collect()
}

/// Labels of the four ablation runs, in grid order.
pub const ABLATION_RUNS: [(&str, bool, bool); 4] = [
    ("U-Net", false, false),
    ("U-Net + DA", true, false),
    ("U-Net + BCS", false, true),
    ("U-Net + DA + BCS", true, true),
];

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub label: String,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub report: EvaluationReport,
}

/// Trains the {±DA, ±BCS} grid with identical seeds and evaluates each run on `eval_split`.
/// `precomputed` supplies already-trained runs by label.
pub fn run_ablation(
    manifest: &Manifest,
    base: &TrainConfig,
    eval_split: Split,
    options: EvalOptions,
    mut precomputed: BTreeMap<String, Checkpoint>,
    mut on_epoch: impl FnMut(&str, &EpochMetrics),
) -> Result<(Vec<AblationRun>, AblationTable)> {
    let data = TrainingData::from_manifest(manifest, base)?;
    let eval_entries = select(manifest, Some(eval_split));
    if eval_entries.is_empty() {
        return Err(CaliperError::InvalidInput(format!("no {eval_split} entries to evaluate")));
    }
    let owned: Vec<ManifestEntry> = eval_entries.iter().map(|e| (*e).clone()).collect();
    let mut runs = Vec::new();
    for (label, da, bcs) in ABLATION_RUNS {
        let config = TrainConfig {
            augmentation: if da { base.augmentation } else { AugmentFlags::none() },
            bcs,
            ..base.clone()
        };
        let (checkpoint, history) = match precomputed.remove(label) {
            Some(c) => {
                let h = c.header.history.clone();
                (c, h)
            }
            None => {
                let out = train(&data, &config, |m| on_epoch(label, m))?;
                (out.best, out.history)
            }
        };
        let preds = predict_entries(&checkpoint, manifest, &eval_entries)?;
        let report = evaluate(&prediction_sets(&preds)?, &owned, options)?;
        runs.push(AblationRun {
            label: label.to_string(),
            checkpoint,
            history,
            report,
        });
    }
    let table = ablation_report(&runs.iter().map(|r| (r.label.clone(), r.report.clone())).collect::<Vec<_>>())?;
    Ok((runs, table))
}
