//! Dataset manifests: one JSON record per line, multi-rater two-pass annotations.
//!
//! ```text
//! {"schema_version":1,"subject_id":"s0001","image_path":"images/s0001.png","plane":"TC",
//!  "split":"train","width":288,"height":160,
//!  "spacing":{"mm_per_px_x":0.25,"mm_per_px_y":0.25},
//!  "annotations":{"r1":{"pass1":{"TCD_1":{"x":1.0,"y":2.0},...},"pass2":null}}}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CaliperError, Result};
use crate::geometry::{CaliperPoint, LandmarkSet, PixelSpacing, PlaneConfig};
use crate::raster::Raster;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub type PointMap = BTreeMap<String, CaliperPoint>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterAnnotation {
    pub pass1: PointMap,
    #[serde(default)]
    pub pass2: Option<PointMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema_version: u32,
    pub subject_id: String,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub plane: String,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    pub spacing: PixelSpacing,
    pub annotations: BTreeMap<String, RaterAnnotation>,
}

impl ManifestEntry {
    pub fn plane_config(&self) -> Result<PlaneConfig> {
        PlaneConfig::by_name(&self.plane)
    }

    pub fn raters(&self) -> impl Iterator<Item = &String> {
        self.annotations.keys()
    }

    /// Checks names, completeness and bounds of every annotation pass.
    pub fn validate_annotations(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let plane = match self.plane_config() {
            Ok(p) => p,
            Err(e) => return vec![e.to_string()],
        };
        if self.annotations.is_empty() {
            issues.push("no rater annotations".to_string());
        }
        for (rater, ann) in &self.annotations {
            let passes = std::iter::once(("pass1", &ann.pass1)).chain(ann.pass2.as_ref().map(|p| ("pass2", p)));
            for (pass, points) in passes {
                let check = LandmarkSet::new(plane.clone(), points.clone())
                    .and_then(|s| s.check_bounds(self.width, self.height));
                if let Err(e) = check {
                    issues.push(format!("rater {rater} {pass}: {e}"));
                }
            }
        }
        issues
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub line: usize,
    pub subject_id: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} ({}): {}", self.line, self.subject_id, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            base_dir: base_dir.into(),
            entries,
        }
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.image_path)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<Raster> {
        Raster::load_png(&self.image_path(entry))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn find(&self, subject_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.subject_id == subject_id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| CaliperError::io(path, e))
    }
}

/// Result of loading a manifest: valid entries plus per-entry issues.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub issues: Vec<ValidationIssue>,
}

impl LoadedManifest {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Parses records without touching the images.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(parse_record(line, i + 1)?);
    }
    Ok(entries)
}

fn parse_record(line: &str, line_no: usize) -> Result<ManifestEntry> {
    let entry: ManifestEntry =
        serde_json::from_str(line).map_err(|e| CaliperError::Manifest(format!("line {line_no}: {e}")))?;
    if entry.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(CaliperError::Manifest(format!(
            "line {line_no}: unsupported schema version {}",
            entry.schema_version
        )));
    }
    Ok(entry)
}

/// Loads and validates a manifest. Malformed records are a hard error;
/// entries failing validation are reported and left out.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CaliperError::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let entry = parse_record(line, line_no)?;
        let mut problems = entry.validate_annotations();
        match image::image_dimensions(base_dir.join(&entry.image_path)) {
            Ok((w, h)) if (w as usize, h as usize) != (entry.width, entry.height) => problems.push(format!(
                "image is {w}x{h} but the record says {}x{}",
                entry.width, entry.height
            )),
            Ok(_) => {}
            Err(e) => problems.push(format!("image {} unreadable: {e}", entry.image_path)),
        }
        if problems.is_empty() {
            entries.push(entry);
        } else {
            issues.extend(problems.into_iter().map(|message| ValidationIssue {
                line: line_no,
                subject_id: entry.subject_id.clone(),
                message,
            }));
        }
    }
    Ok(LoadedManifest {
        manifest: Manifest::new(base_dir, entries),
        issues,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthPolicy {
    /// Each rater's two passes averaged separately.
    PerRaterMean,
    /// Mean over all raters' per-rater means.
    ConsensusMean,
}

impl std::str::FromStr for GroundTruthPolicy {
    type Err = CaliperError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_rater_mean" | "per-rater-mean" => Ok(Self::PerRaterMean),
            "consensus_mean" | "consensus-mean" => Ok(Self::ConsensusMean),
            other => Err(CaliperError::InvalidInput(format!("unknown policy {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    PerRater(BTreeMap<String, LandmarkSet>),
    Consensus(LandmarkSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGroundTruth {
    pub truth: GroundTruth,
    pub warnings: Vec<String>,
}

fn mean_points(plane: &PlaneConfig, sets: &[&PointMap]) -> Result<LandmarkSet> {
    let mut out = PointMap::new();
    for name in plane.landmark_names() {
        let (mut sx, mut sy) = (0.0, 0.0);
        for s in sets {
            let p = s.get(name).ok_or_else(|| CaliperError::IncompleteSet {
                plane: plane.name().to_string(),
                missing: name.clone(),
            })?;
            sx += p.x;
            sy += p.y;
        }
        let n = sets.len() as f64;
        out.insert(name.clone(), CaliperPoint::new(sx / n, sy / n));
    }
    LandmarkSet::new(plane.clone(), out)
}

pub fn resolve_ground_truth(entry: &ManifestEntry, policy: GroundTruthPolicy) -> Result<ResolvedGroundTruth> {
    let plane = entry.plane_config()?;
    if entry.annotations.is_empty() {
        return Err(CaliperError::Manifest(format!("{}: no annotations", entry.subject_id)));
    }
    let mut warnings = Vec::new();
    let mut per_rater = BTreeMap::new();
    for (rater, ann) in &entry.annotations {
        let set = match &ann.pass2 {
            Some(p2) => mean_points(&plane, &[&ann.pass1, p2])?,
            None => {
                warnings.push(format!("{}: rater {rater} has no second pass, using pass1", entry.subject_id));
                mean_points(&plane, &[&ann.pass1])?
            }
        };
        per_rater.insert(rater.clone(), set);
    }
    let truth = match policy {
        GroundTruthPolicy::PerRaterMean => GroundTruth::PerRater(per_rater),
        GroundTruthPolicy::ConsensusMean => {
            let maps: Vec<PointMap> = per_rater.values().map(|s| s.points().clone()).collect();
            let refs: Vec<&PointMap> = maps.iter().collect();
            GroundTruth::Consensus(mean_points(&plane, &refs)?)
        }
    };
    Ok(ResolvedGroundTruth { truth, warnings })
}

/// Consensus ground truth as a single set.
pub fn consensus(entry: &ManifestEntry) -> Result<LandmarkSet> {
    match resolve_ground_truth(entry, GroundTruthPolicy::ConsensusMean)?.truth {
        GroundTruth::Consensus(s) => Ok(s),
        GroundTruth::PerRater(_) => unreachable!("consensus policy"),
    }
}

/// Per-rater two-pass means.
pub fn per_rater(entry: &ManifestEntry) -> Result<BTreeMap<String, LandmarkSet>> {
    match resolve_ground_truth(entry, GroundTruthPolicy::PerRaterMean)?.truth {
        GroundTruth::PerRater(m) => Ok(m),
        GroundTruth::Consensus(_) => unreachable!("per-rater policy"),
    }
}
