//! Stylized scan-like phantoms with closed-form landmark ground truth.
//!
//! Geometry lives in a head frame `(u, v)`: `u` lateral, `v` along the midline
//! with the posterior side at `+v`. Image position = `center + R(rotation) * (u, v)`,
//! so at rotation 0 the midline is vertical.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmentation::derive_seed;
use crate::dataset::{Manifest, ManifestEntry, PointMap, RaterAnnotation, Split, MANIFEST_SCHEMA_VERSION};
use crate::error::{CaliperError, Result};
use crate::geometry::{CaliperPoint, LandmarkSet, PixelSpacing, PlaneConfig};
use crate::raster::Raster;

pub const PHANTOM_MM_PER_PX: f64 = 0.25;
pub const LANDMARK_MARGIN_PX: f64 = 8.0;
pub const DEFAULT_WIDTH: usize = 288;
pub const DEFAULT_HEIGHT: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    pub background: f64,
    pub parenchyma: f64,
    pub bone: f64,
    pub soft_tissue: f64,
    pub skin: f64,
    pub fluid: f64,
    pub structure: f64,
    pub wall: f64,
    /// Multiplicative speckle standard deviation; 0 renders a clean image.
    pub speckle: f64,
}

impl Default for IntensityProfile {
    fn default() -> Self {
        IntensityProfile {
            background: 0.06,
            parenchyma: 0.3,
            bone: 0.92,
            soft_tissue: 0.4,
            skin: 0.72,
            fluid: 0.05,
            structure: 0.6,
            wall: 0.85,
            speckle: 0.2,
        }
    }
}

impl IntensityProfile {
    pub fn clean() -> Self {
        IntensityProfile {
            speckle: 0.0,
            ..Self::default()
        }
    }
}

/// Two tangent lobes plus a vermis; lobes centered at `(±lateral/2, v_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CerebellumSpec {
    /// Half the transverse diameter.
    pub lateral_semi_axis: f64,
    pub midline_semi_axis: f64,
    /// Midline distance from the posterior cerebellar edge to the inner bone edge.
    pub cisterna_gap: f64,
}

/// Bright-walled ventricle band parallel to the midline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VentricleSpec {
    /// Lateral offset of the band axis.
    pub offset: f64,
    /// Midline position of the atrium (widest point of the lumen).
    pub atrium_v: f64,
    pub length: f64,
    /// Lumen width between the inner wall edges.
    pub atrial_width: f64,
    pub wall_thickness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Anatomy {
    Cerebellum(CerebellumSpec),
    Ventricle(VentricleSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub center: (f64, f64),
    pub rotation_deg: f64,
    /// Inner bone edge semi-axes `(lateral, midline)`.
    pub cranium_semi_axes: (f64, f64),
    pub bone_thickness: f64,
    /// Outer bone edge to outer skin edge.
    pub skin_offset: f64,
    pub anatomy: Anatomy,
    pub texture_seed: u64,
    pub intensity: IntensityProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Raster,
    pub landmarks: LandmarkSet,
    pub spacing: PixelSpacing,
}

/// Axis-aligned ellipse in the head frame.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cu: f64,
    cv: f64,
    au: f64,
    av: f64,
}

impl Ellipse {
    fn new(cu: f64, cv: f64, au: f64, av: f64) -> Self {
        Ellipse { cu, cv, au, av }
    }

    /// First-order signed distance; negative inside.
    fn signed_distance(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.cu, v - self.cv);
        let g = (du / self.au).powi(2) + (dv / self.av).powi(2) - 1.0;
        let gu = 2.0 * du / (self.au * self.au);
        let gv = 2.0 * dv / (self.av * self.av);
        let norm = (gu * gu + gv * gv).sqrt();
        if norm < 1e-12 {
            return -self.au.min(self.av);
        }
        g / norm
    }

    /// Area coverage of a unit pixel, linear across the edge.
    fn coverage(&self, u: f64, v: f64) -> f64 {
        (0.5 - self.signed_distance(u, v)).clamp(0.0, 1.0)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        ((u - self.cu) / self.au).powi(2) + ((v - self.cv) / self.av).powi(2) < 1.0
    }
}

fn invalid(msg: impl Into<String>) -> CaliperError {
    CaliperError::InvalidSpec(msg.into())
}

impl PhantomSpec {
    pub fn plane(&self) -> PlaneConfig {
        match self.anatomy {
            Anatomy::Cerebellum(_) => PlaneConfig::tc(),
            Anatomy::Ventricle(_) => PlaneConfig::tv(),
        }
    }

    fn to_image(&self, u: f64, v: f64) -> CaliperPoint {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        CaliperPoint::new(self.center.0 + c * u - s * v, self.center.1 + s * u + c * v)
    }

    fn to_head(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn inner(&self) -> Ellipse {
        let (a, b) = self.cranium_semi_axes;
        Ellipse::new(0.0, 0.0, a, b)
    }

    /// Landmarks in head-frame coordinates, in plane order.
    fn head_landmarks(&self) -> Vec<(f64, f64)> {
        let (_, am) = self.cranium_semi_axes;
        match self.anatomy {
            Anatomy::Cerebellum(c) => {
                let vc = self.cerebellum_center_v(&c);
                let bone_out = am + self.bone_thickness;
                vec![
                    (-c.lateral_semi_axis, vc),
                    (c.lateral_semi_axis, vc),
                    (0.0, am - c.cisterna_gap),
                    (0.0, am),
                    (0.0, bone_out),
                    (0.0, bone_out + self.skin_offset),
                ]
            }
            Anatomy::Ventricle(t) => vec![
                (t.offset - t.atrial_width / 2.0, t.atrium_v),
                (t.offset + t.atrial_width / 2.0, t.atrium_v),
            ],
        }
    }

    fn cerebellum_center_v(&self, c: &CerebellumSpec) -> f64 {
        self.cranium_semi_axes.1 - c.cisterna_gap - c.midline_semi_axis
    }

    pub fn landmarks(&self) -> Result<LandmarkSet> {
        let pts: Vec<CaliperPoint> = self
            .head_landmarks()
            .into_iter()
            .map(|(u, v)| self.to_image(u, v))
            .collect();
        LandmarkSet::from_ordered(self.plane(), &pts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 * LANDMARK_MARGIN_PX as usize + 1 || self.height < 2 * LANDMARK_MARGIN_PX as usize + 1 {
            return Err(invalid(format!("canvas {}x{} too small", self.width, self.height)));
        }
        let (ab, am) = self.cranium_semi_axes;
        let lengths = [ab, am, self.bone_thickness, self.skin_offset];
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(invalid("cranium lengths must be positive"));
        }
        let inner = self.inner();
        match self.anatomy {
            Anatomy::Cerebellum(c) => {
                let l = [c.lateral_semi_axis, c.midline_semi_axis, c.cisterna_gap];
                if l.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                    return Err(invalid("cerebellum lengths must be positive"));
                }
                let vc = self.cerebellum_center_v(&c);
                if !inner.contains(c.lateral_semi_axis, vc) || !inner.contains(0.0, vc - c.midline_semi_axis) {
                    return Err(invalid("cerebellum does not fit inside the cranium"));
                }
            }
            Anatomy::Ventricle(t) => {
                let l = [t.length, t.atrial_width, t.wall_thickness];
                if l.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                    return Err(invalid("ventricle lengths must be positive"));
                }
                let half_u = t.atrial_width / 2.0 + t.wall_thickness;
                let corners = [
                    (t.offset - half_u, t.atrium_v),
                    (t.offset + half_u, t.atrium_v),
                    (t.offset, t.atrium_v - t.length / 2.0),
                    (t.offset, t.atrium_v + t.length / 2.0),
                ];
                if corners.iter().any(|&(u, v)| !inner.contains(u, v)) {
                    return Err(invalid("ventricle does not fit inside the cranium"));
                }
                if t.offset - half_u <= 1.0 {
                    return Err(invalid("ventricle overlaps the midline"));
                }
            }
        }
        let set = self.landmarks()?;
        let (xmax, ymax) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        for (name, p) in set.points() {
            let m = LANDMARK_MARGIN_PX;
            if !(p.x >= m && p.x <= xmax - m && p.y >= m && p.y <= ymax - m) {
                return Err(invalid(format!(
                    "landmark {name} at ({:.2}, {:.2}) is within {m} px of the canvas edge",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }

    fn render_clean(&self) -> Raster {
        let ip = &self.intensity;
        let (ab, am) = self.cranium_semi_axes;
        let t = self.bone_thickness;
        let s = self.skin_offset;
        let skin_line = (s * 0.3).clamp(1.0, 2.5);
        let skin_outer = Ellipse::new(0.0, 0.0, ab + t + s, am + t + s);
        let skin_inner = Ellipse::new(0.0, 0.0, ab + t + s - skin_line, am + t + s - skin_line);
        let bone = Ellipse::new(0.0, 0.0, ab + t, am + t);
        let inner = self.inner();
        Raster::from_fn(self.width, self.height, |x, y| {
            let (u, v) = self.to_head(x as f64, y as f64);
            let over = |base: f64, value: f64, alpha: f64| base + (value - base) * alpha;
            let mut val = ip.background;
            val = over(val, ip.skin, skin_outer.coverage(u, v));
            val = over(val, ip.soft_tissue, skin_inner.coverage(u, v));
            val = over(val, ip.bone, bone.coverage(u, v));
            let inside = inner.coverage(u, v);
            val = over(val, ip.parenchyma, inside);
            match self.anatomy {
                Anatomy::Cerebellum(c) => {
                    let vc = self.cerebellum_center_v(&c);
                    let half = c.lateral_semi_axis / 2.0;
                    let cisterna = Ellipse::new(0.0, am - c.cisterna_gap / 2.0, half * 1.4, c.cisterna_gap / 2.0 + 3.0);
                    val = over(val, ip.fluid, cisterna.coverage(u, v) * inside);
                    let lobes = Ellipse::new(-half, vc, half, c.midline_semi_axis)
                        .coverage(u, v)
                        .max(Ellipse::new(half, vc, half, c.midline_semi_axis).coverage(u, v))
                        .max(Ellipse::new(0.0, vc, half * 0.8, c.midline_semi_axis).coverage(u, v));
                    val = over(val, ip.structure, lobes);
                }
                Anatomy::Ventricle(tv) => {
                    let falx = Ellipse::new(0.0, 0.0, 0.8, am * 0.85);
                    val = over(val, ip.wall * 0.7, falx.coverage(u, v));
                    let hw = tv.atrial_width / 2.0;
                    let hl = tv.length / 2.0;
                    let walls = Ellipse::new(tv.offset, tv.atrium_v, hw + tv.wall_thickness, hl + tv.wall_thickness);
                    val = over(val, ip.wall, walls.coverage(u, v));
                    val = over(val, ip.fluid, Ellipse::new(tv.offset, tv.atrium_v, hw, hl).coverage(u, v));
                    let glomus = Ellipse::new(tv.offset, tv.atrium_v, hw * 0.45, hl * 0.3);
                    val = over(val, ip.structure, glomus.coverage(u, v));
                }
            }
            val as f32
        })
    }

    fn apply_texture(&self, image: &mut Raster) {
        let k = self.intensity.speckle;
        if k <= 0.0 {
            return;
        }
        let (w, h) = (self.width, self.height);
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let white = Raster::from_fn(w, h, |_, _| normal.sample(&mut rng) as f32);
        // 3x3 box of iid unit normals has sd 1/3
        let grain = Raster::from_fn(w, h, |x, y| {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += white.get_reflect(x as isize + dx, y as isize + dy);
                }
            }
            s / 3.0
        });
        for (p, g) in image.data_mut().iter_mut().zip(grain.data()) {
            *p = (*p as f64 * (1.0 + k * *g as f64)) as f32;
        }
        image.clamp_intensity();
    }

    /// Uniformly randomized spec for `plane`, scaled to the canvas.
    pub fn random(plane: &PlaneConfig, width: usize, height: usize, rng: &mut impl Rng) -> Result<Self> {
        let sc = (width as f64 / DEFAULT_WIDTH as f64).min(height as f64 / DEFAULT_HEIGHT as f64);
        let tc = match plane.name() {
            "TC" => true,
            "TV" => false,
            other => return Err(invalid(format!("no phantom anatomy for plane {other}"))),
        };
        for _ in 0..64 {
            let am = rng.gen_range(84.0..96.0) * sc;
            let ab = rng.gen_range(54.0..62.0) * sc;
            let anatomy = if tc {
                Anatomy::Cerebellum(CerebellumSpec {
                    lateral_semi_axis: rng.gen_range(18.0..26.0) * sc,
                    midline_semi_axis: rng.gen_range(10.0..14.0) * sc,
                    cisterna_gap: rng.gen_range(8.0..14.0) * sc,
                })
            } else {
                Anatomy::Ventricle(VentricleSpec {
                    offset: rng.gen_range(26.0..32.0) * sc,
                    atrium_v: rng.gen_range(5.0..25.0) * sc,
                    length: rng.gen_range(60.0..85.0) * sc,
                    atrial_width: rng.gen_range(16.0..28.0) * sc,
                    wall_thickness: rng.gen_range(2.5..4.0) * sc,
                })
            };
            let gain = rng.gen_range(0.85..1.1);
            let base = IntensityProfile::default();
            let spec = PhantomSpec {
                width,
                height,
                center: (
                    width as f64 / 2.0 - 22.0 * sc + rng.gen_range(-10.0..10.0) * sc,
                    height as f64 / 2.0 + rng.gen_range(-6.0..6.0) * sc,
                ),
                rotation_deg: -90.0 + rng.gen_range(-12.0..12.0),
                cranium_semi_axes: (ab, am),
                bone_thickness: rng.gen_range(4.0..6.5) * sc,
                skin_offset: rng.gen_range(7.0..12.0) * sc,
                anatomy,
                texture_seed: rng.gen(),
                intensity: IntensityProfile {
                    parenchyma: base.parenchyma * gain,
                    soft_tissue: base.soft_tissue * gain,
                    structure: base.structure * gain,
                    speckle: rng.gen_range(0.12..0.28),
                    ..base
                },
            };
            if spec.validate().is_ok() {
                return Ok(spec);
            }
        }
        Err(invalid("could not sample a valid phantom for this canvas"))
    }
}

/// Renders a phantom; identical specs give bit-identical images.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut image = spec.render_clean();
    spec.apply_texture(&mut image);
    Ok(Phantom {
        image,
        landmarks: spec.landmarks()?,
        spacing: PixelSpacing::isotropic(PHANTOM_MM_PER_PX)?,
    })
}

/// Simulated annotators: a fixed per-rater offset plus per-pass jitter, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterSimulation {
    pub raters: usize,
    pub bias_sd_px: f64,
    pub pass_sd_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub plane: String,
    pub width: usize,
    pub height: usize,
    /// Train and validation parts of the split ratio, e.g. `(88, 12)`.
    pub split_ratio: (u32, u32),
    /// Extra held-out phantoms in the test split.
    pub test_count: usize,
    /// `None` stores the exact ground truth as a single rater.
    pub raters: Option<RaterSimulation>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            plane: "TC".into(),
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            split_ratio: (88, 12),
            test_count: 0,
            raters: None,
        }
    }
}

pub const EXACT_RATER: &str = "phantom";

/// Train/validation sizes for `n` subjects; both parts get at least one.
pub fn split_counts(n: usize, ratio: (u32, u32)) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(CaliperError::InvalidInput(format!("need at least 2 phantoms, got {n}")));
    }
    let total = ratio.0 as usize + ratio.1 as usize;
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(CaliperError::InvalidInput("split ratio parts must be positive".into()));
    }
    let train = (n * ratio.0 as usize / total).clamp(1, n - 1);
    Ok((train, n - train))
}

fn simulate_rater(
    truth: &LandmarkSet,
    sim: &RaterSimulation,
    seed: u64,
    width: usize,
    height: usize,
) -> RaterAnnotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = Normal::new(0.0, sim.bias_sd_px.max(0.0)).expect("finite sd");
    let jitter = Normal::new(0.0, sim.pass_sd_px.max(0.0)).expect("finite sd");
    let offsets: BTreeMap<&String, (f64, f64)> = truth
        .points()
        .keys()
        .map(|k| (k, (bias.sample(&mut rng), bias.sample(&mut rng))))
        .collect();
    let mut pass = || -> PointMap {
        truth
            .points()
            .iter()
            .map(|(k, p)| {
                let (bx, by) = offsets[k];
                let x = (p.x + bx + jitter.sample(&mut rng)).clamp(0.0, width as f64 - 1.0);
                let y = (p.y + by + jitter.sample(&mut rng)).clamp(0.0, height as f64 - 1.0);
                (k.clone(), CaliperPoint::new(x, y))
            })
            .collect()
    };
    let pass1 = pass();
    let pass2 = pass();
    RaterAnnotation {
        pass1,
        pass2: Some(pass2),
    }
}

/// Builds manifest entries and images in memory; ids are `ph00000`, `ph00001`, ...
pub fn build_dataset(n: usize, seed: u64, config: &DatasetConfig) -> Result<Vec<(ManifestEntry, Raster)>> {
    let (train, _) = split_counts(n, config.split_ratio)?;
    let plane = PlaneConfig::by_name(&config.plane)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // subject order is shuffled before assigning splits; one phantom per subject
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut split_of = vec![Split::Validation; n];
    for &i in &order[..train] {
        split_of[i] = Split::Train;
    }
    split_of.extend(std::iter::repeat(Split::Test).take(config.test_count));
    let mut out = Vec::with_capacity(split_of.len());
    for (i, split) in split_of.into_iter().enumerate() {
        let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let spec = PhantomSpec::random(&plane, config.width, config.height, &mut prng)?;
        let ph = generate(&spec)?;
        let subject_id = format!("ph{i:05}");
        let annotations = match &config.raters {
            None => BTreeMap::from([(
                EXACT_RATER.to_string(),
                RaterAnnotation {
                    pass1: ph.landmarks.points().clone(),
                    pass2: Some(ph.landmarks.points().clone()),
                },
            )]),
            Some(sim) => (0..sim.raters)
                .map(|r| {
                    let s = derive_seed(derive_seed(seed, i as u64), 1_000 + r as u64);
                    (
                        format!("r{}", r + 1),
                        simulate_rater(&ph.landmarks, sim, s, config.width, config.height),
                    )
                })
                .collect(),
        };
        let entry = ManifestEntry {
            schema_version: MANIFEST_SCHEMA_VERSION,
            image_path: format!("images/{subject_id}.png"),
            subject_id,
            plane: plane.name().to_string(),
            split,
            width: config.width,
            height: config.height,
            spacing: ph.spacing,
            annotations,
        };
        out.push((entry, ph.image));
    }
    Ok(out)
}

/// Writes `images/*.png` and `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(n: usize, seed: u64, config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let built = build_dataset(n, seed, config)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| CaliperError::io(&images, e))?;
    let mut entries = Vec::with_capacity(built.len());
    for (entry, image) in built {
        image.save_png16(&out_dir.join(&entry.image_path))?;
        entries.push(entry);
    }
    let manifest = Manifest::new(out_dir, entries);
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_biometry;

    fn symmetric_tc(width: usize, height: usize) -> PhantomSpec {
        PhantomSpec {
            width,
            height,
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0 - 20.0),
            rotation_deg: 0.0,
            cranium_semi_axes: (70.0, 60.0),
            bone_thickness: 5.0,
            skin_offset: 9.0,
            anatomy: Anatomy::Cerebellum(CerebellumSpec {
                lateral_semi_axis: 20.0,
                midline_semi_axis: 11.0,
                cisterna_gap: 10.0,
            }),
            texture_seed: 5,
            intensity: IntensityProfile::clean(),
        }
    }

    fn tc_with(lateral: f64) -> PhantomSpec {
        let mut s = symmetric_tc(200, 200);
        if let Anatomy::Cerebellum(c) = &mut s.anatomy {
            c.lateral_semi_axis = lateral;
        }
        s
    }

    #[test]
    fn symmetric_spec_gives_mirrored_tcd() {
        let ph = generate(&symmetric_tc(201, 200)).unwrap();
        let a = ph.landmarks.get("TCD_1").unwrap();
        let b = ph.landmarks.get("TCD_2").unwrap();
        assert!((a.x + b.x - 200.0).abs() < 1e-9);
        assert!((a.y - b.y).abs() < 1e-9);
        // the image is mirror-symmetric too
        for y in 0..200 {
            for x in 0..100 {
                assert!((ph.image.get(x, y) - ph.image.get(200 - x, y)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn doubling_lateral_semi_axis_doubles_tcd() {
        let sp = PixelSpacing::isotropic(PHANTOM_MM_PER_PX).unwrap();
        let small = compute_biometry(&generate(&tc_with(12.0)).unwrap().landmarks, sp).unwrap()["TCD"];
        let big = compute_biometry(&generate(&tc_with(24.0)).unwrap().landmarks, sp).unwrap()["TCD"];
        assert!((small - 2.0 * 12.0 * 0.25).abs() < 1e-9);
        assert!((big - 2.0 * small).abs() < 1e-9);
    }

    #[test]
    fn same_spec_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = PhantomSpec::random(&PlaneConfig::tc(), 288, 160, &mut rng).unwrap();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn margin_violation_is_invalid_spec() {
        let mut s = symmetric_tc(200, 200);
        s.center.1 += 40.0;
        let err = generate(&s).unwrap_err().to_string();
        assert!(err.contains("NFT_2"), "{err}");
        let mut s = symmetric_tc(200, 200);
        s.cranium_semi_axes.0 = 15.0;
        assert!(matches!(generate(&s), Err(CaliperError::InvalidSpec(_))));
    }

    /// First position along `dir` from `start` where the clean image crosses `level`.
    fn crossing(img: &Raster, start: CaliperPoint, dir: (f64, f64), level: f32, rising: bool) -> f64 {
        let step = 0.02;
        let mut prev = img.sample_bilinear_clamped(start.x, start.y);
        for i in 1..20_000 {
            let t = i as f64 * step;
            let cur = img.sample_bilinear_clamped(start.x + dir.0 * t, start.y + dir.1 * t);
            if (rising && prev < level && cur >= level) || (!rising && prev >= level && cur < level) {
                return t - step * ((cur - level) as f64 / (cur - prev) as f64);
            }
            prev = cur;
        }
        panic!("no crossing");
    }

    #[test]
    fn rendered_biometry_matches_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let mut spec = PhantomSpec::random(&PlaneConfig::tc(), 288, 160, &mut rng).unwrap();
            spec.intensity = IntensityProfile::clean();
            let ph = generate(&spec).unwrap();
            let ip = spec.intensity;
            let sp = PixelSpacing::isotropic(PHANTOM_MM_PER_PX).unwrap();
            let truth = compute_biometry(&ph.landmarks, sp).unwrap();
            let Anatomy::Cerebellum(c) = spec.anatomy else { unreachable!() };
            let (s, co) = spec.rotation_deg.to_radians().sin_cos();
            let lateral = (co, s);
            let midline = (-s, co);
            let center = spec.to_image(0.0, spec.cerebellum_center_v(&c));
            let mid = |a: f64, b: f64| ((a + b) / 2.0) as f32;
            let l_plus = crossing(&ph.image, center, lateral, mid(ip.structure, ip.parenchyma), false);
            let l_minus = crossing(&ph.image, center, (-lateral.0, -lateral.1), mid(ip.structure, ip.parenchyma), false);
            let tcd = (l_plus + l_minus) * 0.25;
            let cms_1 = crossing(&ph.image, center, midline, mid(ip.structure, ip.fluid), false);
            let cms_2 = crossing(&ph.image, center, midline, mid(ip.fluid, ip.bone), true);
            let nft_1 = crossing(&ph.image, center, midline, mid(ip.bone, ip.soft_tissue), false);
            let past_bone = CaliperPoint::new(center.x + midline.0 * nft_1, center.y + midline.1 * nft_1);
            let nft_2 = nft_1 + crossing(&ph.image, past_bone, midline, mid(ip.skin, ip.background), false);
            let tol = PHANTOM_MM_PER_PX;
            assert!((tcd - truth["TCD"]).abs() < tol, "{tcd} vs {}", truth["TCD"]);
            assert!(((cms_2 - cms_1) * 0.25 - truth["CMS"]).abs() < tol);
            assert!(((nft_2 - nft_1) * 0.25 - truth["NFT"]).abs() < tol);
        }
    }

    #[test]
    fn rendered_atrial_width_matches_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let mut spec = PhantomSpec::random(&PlaneConfig::tv(), 288, 160, &mut rng).unwrap();
            spec.intensity = IntensityProfile::clean();
            let ph = generate(&spec).unwrap();
            let ip = spec.intensity;
            let Anatomy::Ventricle(t) = spec.anatomy else { unreachable!() };
            let (s, co) = spec.rotation_deg.to_radians().sin_cos();
            // start in the lumen between the glomus and the outer wall
            let start = spec.to_image(t.offset + t.atrial_width * 0.35, t.atrium_v);
            let level = ((ip.fluid + ip.wall) / 2.0) as f32;
            let out = crossing(&ph.image, start, (co, s), level, true);
            let start_in = spec.to_image(t.offset - t.atrial_width * 0.35, t.atrium_v);
            let inn = crossing(&ph.image, start_in, (-co, -s), level, true);
            let aw = out + inn + t.atrial_width * 0.7;
            assert!((aw - t.atrial_width).abs() < 1.0, "{aw} vs {}", t.atrial_width);
        }
    }

    #[test]
    fn random_specs_are_valid_for_both_planes_and_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for plane in [PlaneConfig::tc(), PlaneConfig::tv()] {
            for (w, h) in [(288, 160), (576, 320), (96, 64)] {
                for _ in 0..20 {
                    let s = PhantomSpec::random(&plane, w, h, &mut rng).unwrap();
                    s.validate().unwrap();
                }
            }
        }
        assert!(PhantomSpec::random(&PlaneConfig::by_name("TC").unwrap(), 20, 20, &mut rng).is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(240, (88, 12)).unwrap(), (211, 29));
        assert_eq!(split_counts(200, (88, 12)).unwrap(), (176, 24));
        assert_eq!(split_counts(2, (88, 12)).unwrap(), (1, 1));
        assert!(split_counts(1, (88, 12)).is_err());
    }

    #[test]
    fn dataset_is_deterministic_disjoint_and_valid() {
        let cfg = DatasetConfig {
            width: 96,
            height: 64,
            test_count: 3,
            ..DatasetConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(12, 4, &cfg, dir.path()).unwrap();
        let loaded = crate::dataset::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert!(loaded.is_clean(), "{:?}", loaded.issues);
        assert_eq!(loaded.manifest.entries, m.entries);
        let count = |s| m.entries.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (10, 2, 3));
        let ids: std::collections::BTreeSet<_> = m.entries.iter().map(|e| &e.subject_id).collect();
        assert_eq!(ids.len(), 15);
        let again = build_dataset(12, 4, &cfg).unwrap();
        assert_eq!(again.into_iter().map(|(e, _)| e).collect::<Vec<_>>(), m.entries);
        assert!(build_dataset(1, 4, &cfg).is_err());
    }

    #[test]
    fn simulated_raters_are_deterministic_and_in_bounds() {
        let cfg = DatasetConfig {
            plane: "TV".into(),
            raters: Some(RaterSimulation {
                raters: 3,
                bias_sd_px: 1.0,
                pass_sd_px: 0.5,
            }),
            ..DatasetConfig::default()
        };
        let a = build_dataset(4, 8, &cfg).unwrap();
        let b = build_dataset(4, 8, &cfg).unwrap();
        assert_eq!(a, b);
        for (e, _) in &a {
            assert_eq!(e.annotations.len(), 3);
            assert!(e.validate_annotations().is_empty());
        }
    }
}
