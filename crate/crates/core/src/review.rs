//! On-disk review records: one JSON file per study, replaced atomically on write.
//!
//! Model predictions are never modified after import; reviewer edits live in
//! `adjustment` and every write appends to `history`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CaliperError, Result};
use crate::geometry::{CaliperPoint, LandmarkSet, PixelSpacing, PlaneConfig};
use crate::training::Inference;

pub const REVIEW_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Unreviewed,
    Adjusted,
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub landmarks: BTreeMap<String, CaliperPoint>,
    pub confidences: BTreeMap<String, f64>,
    pub biometry_mm: BTreeMap<String, f64>,
    #[serde(default)]
    pub failures: BTreeMap<String, String>,
}

impl From<Inference> for Prediction {
    fn from(i: Inference) -> Self {
        Prediction {
            landmarks: i.landmarks,
            confidences: i.confidences,
            biometry_mm: i.biometry_mm,
            failures: i.failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjustment {
    pub landmarks: BTreeMap<String, CaliperPoint>,
    pub biometry_mm: BTreeMap<String, f64>,
    pub updated_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryAction {
    Imported,
    Adjusted { landmarks: BTreeMap<String, CaliperPoint> },
    Accepted { confirmed_prediction: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub revision: u64,
    pub at_ms: u64,
    pub action: HistoryAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub schema_version: u32,
    pub study_id: String,
    pub image_path: PathBuf,
    pub plane: PlaneConfig,
    pub width: usize,
    pub height: usize,
    pub spacing: PixelSpacing,
    pub prediction: Prediction,
    pub adjustment: Option<Adjustment>,
    pub status: ReviewStatus,
    /// Accepted without edits.
    pub confirmed_prediction: bool,
    /// Incremented on every write; clients echo it back to detect conflicts.
    pub revision: u64,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub history: Vec<HistoryEvent>,
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Biometry for every pair whose endpoints are both present.
pub fn biometry_of(plane: &PlaneConfig, points: &BTreeMap<String, CaliperPoint>, spacing: PixelSpacing) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for pair in plane.biometry_pairs() {
        if let (Some(a), Some(b)) = (points.get(&pair.landmark_a), points.get(&pair.landmark_b)) {
            out.insert(pair.name.clone(), crate::geometry::biometry_length(*a, *b, spacing)?);
        }
    }
    Ok(out)
}

impl StudyRecord {
    pub fn new(
        study_id: &str,
        image_path: PathBuf,
        plane: PlaneConfig,
        (width, height): (usize, usize),
        spacing: PixelSpacing,
        prediction: Prediction,
    ) -> Result<Self> {
        validate_id(study_id)?;
        let now = now_ms();
        let prediction = Prediction {
            biometry_mm: biometry_of(&plane, &prediction.landmarks, spacing)?,
            ..prediction
        };
        Ok(StudyRecord {
            schema_version: REVIEW_SCHEMA_VERSION,
            study_id: study_id.to_string(),
            image_path,
            plane,
            width,
            height,
            spacing,
            prediction,
            adjustment: None,
            status: ReviewStatus::Unreviewed,
            confirmed_prediction: false,
            revision: 0,
            created_at_ms: now,
            updated_at_ms: now,
            history: vec![HistoryEvent {
                revision: 0,
                at_ms: now,
                action: HistoryAction::Imported,
            }],
        })
    }

    /// Adjusted points if any, otherwise the model's.
    pub fn current_points(&self) -> &BTreeMap<String, CaliperPoint> {
        self.adjustment.as_ref().map_or(&self.prediction.landmarks, |a| &a.landmarks)
    }

    /// Recomputed from the current points; never read from a cache.
    pub fn current_biometry(&self) -> Result<BTreeMap<String, f64>> {
        biometry_of(&self.plane, self.current_points(), self.spacing)
    }

    /// Checks the stored invariants.
    pub fn check(&self) -> Result<()> {
        if self.status == ReviewStatus::Accepted && self.adjustment.is_none() && !self.confirmed_prediction {
            return Err(CaliperError::InvalidInput(format!(
                "study {} is accepted without adjustment or confirmation",
                self.study_id
            )));
        }
        let stored = [
            (&self.prediction.landmarks, &self.prediction.biometry_mm),
        ]
        .into_iter()
        .chain(self.adjustment.as_ref().map(|a| (&a.landmarks, &a.biometry_mm)));
        for (points, biometry) in stored {
            let fresh = biometry_of(&self.plane, points, self.spacing)?;
            if fresh.len() != biometry.len()
                || fresh.iter().any(|(k, v)| biometry.get(k).map_or(true, |b| (b - v).abs() > 1e-9))
            {
                return Err(CaliperError::InvalidInput(format!(
                    "study {}: stored biometry does not match its points",
                    self.study_id
                )));
            }
        }
        Ok(())
    }

    fn check_revision(&self, expected: u64) -> Result<()> {
        if expected != self.revision {
            return Err(CaliperError::Conflict {
                study: self.study_id.clone(),
                expected,
                current: self.revision,
            });
        }
        Ok(())
    }

    /// Replaces the reviewer's caliper positions with a full, in-bounds set.
    pub fn adjust(&mut self, points: BTreeMap<String, CaliperPoint>, expected_revision: u64) -> Result<()> {
        self.check_revision(expected_revision)?;
        let set = LandmarkSet::new(self.plane.clone(), points)?;
        set.check_bounds(self.width, self.height)?;
        let now = now_ms();
        self.revision += 1;
        self.adjustment = Some(Adjustment {
            biometry_mm: biometry_of(&self.plane, set.points(), self.spacing)?,
            landmarks: set.points().clone(),
            updated_at_ms: now,
        });
        self.status = ReviewStatus::Adjusted;
        self.updated_at_ms = now;
        self.history.push(HistoryEvent {
            revision: self.revision,
            at_ms: now,
            action: HistoryAction::Adjusted {
                landmarks: set.points().clone(),
            },
        });
        Ok(())
    }

    /// Accepts the current calipers; accepting an unedited study confirms the prediction,
    /// which must then be complete.
    pub fn accept(&mut self, expected_revision: Option<u64>) -> Result<()> {
        if let Some(r) = expected_revision {
            self.check_revision(r)?;
        }
        let confirmed = self.adjustment.is_none();
        if confirmed {
            LandmarkSet::new(self.plane.clone(), self.prediction.landmarks.clone())?;
        }
        let now = now_ms();
        self.revision += 1;
        self.confirmed_prediction = confirmed;
        self.status = ReviewStatus::Accepted;
        self.updated_at_ms = now;
        self.history.push(HistoryEvent {
            revision: self.revision,
            at_ms: now,
            action: HistoryAction::Accepted {
                confirmed_prediction: confirmed,
            },
        });
        Ok(())
    }
}

/// Study ids become file names, so only `[A-Za-z0-9_.-]` is allowed.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CaliperError::InvalidInput(format!("invalid study id {id:?}")))
    }
}

/// Directory-backed store; writes to one study are serialized.
#[derive(Debug, Clone)]
pub struct ReviewStore {
    dir: PathBuf,
    locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
}

impl ReviewStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| CaliperError::io(&dir, e))?;
        Ok(ReviewStore {
            dir,
            locks: Arc::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().expect("lock table poisoned");
        map.entry(id.to_string()).or_default().clone()
    }

    fn write(&self, record: &StudyRecord) -> Result<()> {
        record.check()?;
        let path = self.path(&record.study_id);
        let tmp = self.dir.join(format!(".{}.json.tmp", record.study_id));
        let bytes = serde_json::to_vec_pretty(record)?;
        std::fs::write(&tmp, bytes).map_err(|e| CaliperError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CaliperError::io(&path, e))
    }

    /// Inserts or replaces a study record.
    pub fn put(&self, record: &StudyRecord) -> Result<()> {
        validate_id(&record.study_id)?;
        let lock = self.lock(&record.study_id);
        let _guard = lock.lock().expect("study lock poisoned");
        self.write(record)
    }

    pub fn get(&self, id: &str) -> Result<StudyRecord> {
        validate_id(id).map_err(|_| CaliperError::NotFound(id.to_string()))?;
        let path = self.path(id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CaliperError::NotFound(id.to_string())),
            Err(e) => return Err(CaliperError::io(&path, e)),
        };
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// All study ids, sorted.
    pub fn ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        let entries = std::fs::read_dir(&self.dir).map_err(|e| CaliperError::io(&self.dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CaliperError::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                if validate_id(id).is_ok() {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn list(&self) -> Result<Vec<StudyRecord>> {
        self.ids()?.iter().map(|id| self.get(id)).collect()
    }

    /// Read-modify-write under the study's lock.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut StudyRecord) -> Result<()>) -> Result<StudyRecord> {
        let lock = self.lock(id);
        let _guard = lock.lock().expect("study lock poisoned");
        let mut record = self.get(id)?;
        f(&mut record)?;
        self.write(&record)?;
        Ok(record)
    }

    pub fn adjust(&self, id: &str, points: BTreeMap<String, CaliperPoint>, expected_revision: u64) -> Result<StudyRecord> {
        self.update(id, |r| r.adjust(points, expected_revision))
    }

    pub fn accept(&self, id: &str, expected_revision: Option<u64>) -> Result<StudyRecord> {
        self.update(id, |r| r.accept(expected_revision))
    }
}
