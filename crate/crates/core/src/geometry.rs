//! Coordinate types, physical calibration and biometry from caliper pairs.
//!
//! Coordinates are `(x = column, y = row)` with the origin at the top-left
//! pixel center. Lengths are straight caliper-to-caliper segments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CaliperError, Result};

/// A subpixel image position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaliperPoint {
    pub x: f64,
    pub y: f64,
}

impl CaliperPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        CaliperPoint { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// True when the point lies in `[0, width) x [0, height)`.
    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.is_finite()
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x < width as f64
            && self.y < height as f64
    }

    pub fn distance_px(&self, other: &CaliperPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Millimeters per pixel along columns (`x`) and rows (`y`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpacing", into = "RawSpacing")]
pub struct PixelSpacing {
    mm_per_px_x: f64,
    mm_per_px_y: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSpacing {
    mm_per_px_x: f64,
    mm_per_px_y: f64,
}

impl TryFrom<RawSpacing> for PixelSpacing {
    type Error = CaliperError;

    fn try_from(raw: RawSpacing) -> Result<Self> {
        PixelSpacing::new(raw.mm_per_px_x, raw.mm_per_px_y)
    }
}

impl From<PixelSpacing> for RawSpacing {
    fn from(s: PixelSpacing) -> Self {
        RawSpacing {
            mm_per_px_x: s.mm_per_px_x,
            mm_per_px_y: s.mm_per_px_y,
        }
    }
}

impl PixelSpacing {
    pub fn new(mm_per_px_x: f64, mm_per_px_y: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(mm_per_px_x) || !ok(mm_per_px_y) {
            return Err(CaliperError::InvalidInput(format!(
                "pixel spacing must be finite and positive, got ({mm_per_px_x}, {mm_per_px_y})"
            )));
        }
        Ok(PixelSpacing {
            mm_per_px_x,
            mm_per_px_y,
        })
    }

    pub fn isotropic(mm_per_px: f64) -> Result<Self> {
        Self::new(mm_per_px, mm_per_px)
    }

    pub fn mm_per_px_x(&self) -> f64 {
        self.mm_per_px_x
    }

    pub fn mm_per_px_y(&self) -> f64 {
        self.mm_per_px_y
    }
}

/// One measurement: the segment between two named calipers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiometryPair {
    pub name: String,
    pub landmark_a: String,
    pub landmark_b: String,
}

/// Declarative description of a scan plane's calipers and measurements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPlane", into = "RawPlane")]
pub struct PlaneConfig {
    name: String,
    landmarks: Vec<String>,
    pairs: Vec<BiometryPair>,
}

#[derive(Serialize, Deserialize)]
struct RawPlane {
    plane_name: String,
    landmark_names: Vec<String>,
    biometry_pairs: Vec<BiometryPair>,
}

impl TryFrom<RawPlane> for PlaneConfig {
    type Error = CaliperError;

    fn try_from(raw: RawPlane) -> Result<Self> {
        PlaneConfig::new(raw.plane_name, raw.landmark_names, raw.biometry_pairs)
    }
}

impl From<PlaneConfig> for RawPlane {
    fn from(p: PlaneConfig) -> Self {
        RawPlane {
            plane_name: p.name,
            landmark_names: p.landmarks,
            biometry_pairs: p.pairs,
        }
    }
}

fn pair(name: &str) -> BiometryPair {
    BiometryPair {
        name: name.to_string(),
        landmark_a: format!("{name}_1"),
        landmark_b: format!("{name}_2"),
    }
}

impl PlaneConfig {
    /// Builds a plane, checking that the pairs partition the landmarks.
    pub fn new(
        name: impl Into<String>,
        landmarks: Vec<String>,
        pairs: Vec<BiometryPair>,
    ) -> Result<Self> {
        let name = name.into();
        let mut uses: BTreeMap<&str, usize> = landmarks.iter().map(|l| (l.as_str(), 0)).collect();
        if uses.len() != landmarks.len() {
            return Err(CaliperError::Config(format!(
                "plane {name}: duplicate landmark names"
            )));
        }
        for p in &pairs {
            for l in [&p.landmark_a, &p.landmark_b] {
                match uses.get_mut(l.as_str()) {
                    Some(n) => *n += 1,
                    None => {
                        return Err(CaliperError::Config(format!(
                            "plane {name}: pair {} references unknown landmark {l}",
                            p.name
                        )))
                    }
                }
            }
        }
        if let Some((l, n)) = uses.iter().find(|(_, n)| **n != 1) {
            return Err(CaliperError::Config(format!(
                "plane {name}: landmark {l} appears in {n} pairs, expected exactly 1"
            )));
        }
        Ok(PlaneConfig {
            name,
            landmarks,
            pairs,
        })
    }

    /// Transcerebellar plane: TCD, CMS and NFT.
    pub fn tc() -> Self {
        let pairs = vec![pair("TCD"), pair("CMS"), pair("NFT")];
        let landmarks = pairs
            .iter()
            .flat_map(|p| [p.landmark_a.clone(), p.landmark_b.clone()])
            .collect();
        PlaneConfig::new("TC", landmarks, pairs).expect("static TC plane")
    }

    /// Transventricular plane: atrial width.
    pub fn tv() -> Self {
        let p = pair("AW");
        PlaneConfig::new(
            "TV",
            vec![p.landmark_a.clone(), p.landmark_b.clone()],
            vec![p],
        )
        .expect("static TV plane")
    }

    /// Looks up one of the built-in planes by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "TC" => Ok(Self::tc()),
            "TV" => Ok(Self::tv()),
            other => Err(CaliperError::Config(format!("unknown plane {other}"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn landmark_names(&self) -> &[String] {
        &self.landmarks
    }

    pub fn biometry_pairs(&self) -> &[BiometryPair] {
        &self.pairs
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn landmark_index(&self, name: &str) -> Option<usize> {
        self.landmarks.iter().position(|l| l == name)
    }

    pub fn biometry_names(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.name.clone()).collect()
    }
}

/// Named caliper positions for one plane.
///
/// Keys are always a subset of the plane's landmark names; a set built with
/// [`LandmarkSet::new`] is complete.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    plane: PlaneConfig,
    points: BTreeMap<String, CaliperPoint>,
}

impl LandmarkSet {
    pub fn new(plane: PlaneConfig, points: BTreeMap<String, CaliperPoint>) -> Result<Self> {
        let set = Self::partial(plane, points)?;
        set.ensure_complete()?;
        Ok(set)
    }

    /// Allows missing calipers, still rejects unknown names.
    pub fn partial(plane: PlaneConfig, points: BTreeMap<String, CaliperPoint>) -> Result<Self> {
        if let Some(name) = points.keys().find(|k| plane.landmark_index(k).is_none()) {
            return Err(CaliperError::UnknownLandmark {
                plane: plane.name().to_string(),
                name: name.clone(),
            });
        }
        Ok(LandmarkSet { plane, points })
    }

    /// Builds a complete set from points given in plane order.
    pub fn from_ordered(plane: PlaneConfig, points: &[CaliperPoint]) -> Result<Self> {
        if points.len() != plane.landmark_count() {
            return Err(CaliperError::Config(format!(
                "plane {} expects {} points, got {}",
                plane.name(),
                plane.landmark_count(),
                points.len()
            )));
        }
        let map = plane
            .landmark_names()
            .iter()
            .cloned()
            .zip(points.iter().copied())
            .collect();
        Self::new(plane, map)
    }

    pub fn plane(&self) -> &PlaneConfig {
        &self.plane
    }

    pub fn points(&self) -> &BTreeMap<String, CaliperPoint> {
        &self.points
    }

    pub fn get(&self, name: &str) -> Option<CaliperPoint> {
        self.points.get(name).copied()
    }

    pub fn ensure_complete(&self) -> Result<()> {
        match self
            .plane
            .landmark_names()
            .iter()
            .find(|l| !self.points.contains_key(*l))
        {
            Some(missing) => Err(CaliperError::IncompleteSet {
                plane: self.plane.name().to_string(),
                missing: missing.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.ensure_complete().is_ok()
    }

    /// Points in plane order; errors on the first missing caliper.
    pub fn ordered(&self) -> Result<Vec<CaliperPoint>> {
        self.plane
            .landmark_names()
            .iter()
            .map(|l| {
                self.get(l).ok_or_else(|| CaliperError::IncompleteSet {
                    plane: self.plane.name().to_string(),
                    missing: l.clone(),
                })
            })
            .collect()
    }

    /// Checks every present point against the image bounds.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for (name, p) in &self.points {
            if !p.in_bounds(width, height) {
                return Err(CaliperError::OutOfBounds {
                    landmark: name.clone(),
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    /// Applies `f` to every point, keeping names.
    pub fn map_points(&self, mut f: impl FnMut(CaliperPoint) -> CaliperPoint) -> LandmarkSet {
        LandmarkSet {
            plane: self.plane.clone(),
            points: self.points.iter().map(|(k, p)| (k.clone(), f(*p))).collect(),
        }
    }
}

/// Physical length of the segment `a`-`b`.
pub fn biometry_length(a: CaliperPoint, b: CaliperPoint, spacing: PixelSpacing) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(CaliperError::InvalidInput(format!(
            "non-finite caliper coordinates ({}, {}) / ({}, {})",
            a.x, a.y, b.x, b.y
        )));
    }
    let dx = (b.x - a.x) * spacing.mm_per_px_x();
    let dy = (b.y - a.y) * spacing.mm_per_px_y();
    Ok(dx.hypot(dy))
}

/// All of a plane's measurements in millimeters, keyed by biometry name.
pub fn compute_biometry(set: &LandmarkSet, spacing: PixelSpacing) -> Result<BTreeMap<String, f64>> {
    let plane = set.plane();
    let lookup = |name: &str| {
        set.get(name).ok_or_else(|| CaliperError::IncompleteSet {
            plane: plane.name().to_string(),
            missing: name.to_string(),
        })
    };
    plane
        .biometry_pairs()
        .iter()
        .map(|p| {
            let len = biometry_length(lookup(&p.landmark_a)?, lookup(&p.landmark_b)?, spacing)?;
            Ok((p.name.clone(), len))
        })
        .collect()
}
