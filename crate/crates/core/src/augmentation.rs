//! Online augmentation of `(image, landmarks)` pairs for scan-like images.
//!
//! Geometric effects (rotation, translation, shear, zoom) are composed into
//! one affine map that moves the image grid and the landmarks together.
//! Intensity effects (speckle, resolution loss, acoustic shadow, motion blur)
//! never touch the landmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CaliperError, Result};
use crate::geometry::{CaliperPoint, LandmarkSet};
use crate::raster::Raster;

/// Attempts at drawing a geometric transform that keeps every landmark on canvas.
pub const MAX_GEOMETRIC_ATTEMPTS: usize = 10;

/// Parameter ranges. Pixel-valued ranges refer to a 320x576 canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub translate_px: (f64, f64),
    pub shear: (f64, f64),
    pub zoom: (f64, f64),
    pub speckle_sigma: f64,
    pub resample_factor: (f64, f64),
    pub shadow_patches: usize,
    pub shadow_length_px: (f64, f64),
    pub shadow_angle_deg: (f64, f64),
    pub shadow_attenuation: (f64, f64),
    pub shadow_falloff_px: f64,
    pub blur_kernel: usize,
    /// Chance that an enabled effect is drawn for a given sample.
    pub apply_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 20.0,
            translate_px: (40.0, 60.0),
            shear: (0.0, 0.3),
            zoom: (0.6, 1.0),
            speckle_sigma: 0.1,
            resample_factor: (0.3, 0.7),
            shadow_patches: 2,
            shadow_length_px: (75.0, 100.0),
            shadow_angle_deg: (15.0, 20.0),
            shadow_attenuation: (0.2, 0.5),
            shadow_falloff_px: 4.0,
            blur_kernel: 50,
            apply_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub const REFERENCE_WIDTH: usize = 576;

    /// Rescales the pixel-valued ranges for a canvas of the given width.
    pub fn scaled_for_width(&self, width: usize) -> Self {
        let s = width as f64 / Self::REFERENCE_WIDTH as f64;
        let scale = |(a, b): (f64, f64)| (a * s, b * s);
        AugmentConfig {
            translate_px: scale(self.translate_px),
            shadow_length_px: scale(self.shadow_length_px),
            shadow_falloff_px: self.shadow_falloff_px * s,
            blur_kernel: ((self.blur_kernel as f64 * s).round() as usize).max(1),
            ..self.clone()
        }
    }
}

/// Which effects may be drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub rotation: bool,
    pub translation: bool,
    pub shear: bool,
    pub zoom: bool,
    pub speckle: bool,
    pub resolution: bool,
    pub shadow: bool,
    pub blur: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        AugmentFlags {
            rotation: true,
            translation: true,
            shear: true,
            zoom: true,
            speckle: true,
            resolution: true,
            shadow: true,
            blur: true,
        }
    }

    pub fn none() -> Self {
        AugmentFlags {
            rotation: false,
            translation: false,
            shear: false,
            zoom: false,
            speckle: false,
            resolution: false,
            shadow: false,
            blur: false,
        }
    }

    pub fn geometric_only() -> Self {
        AugmentFlags {
            speckle: false,
            resolution: false,
            shadow: false,
            blur: false,
            ..Self::all()
        }
    }

    pub fn intensity_only() -> Self {
        AugmentFlags {
            rotation: false,
            translation: false,
            shear: false,
            zoom: false,
            ..Self::all()
        }
    }

    pub fn any(&self) -> bool {
        *self != Self::none()
    }
}

/// The affine factors, applied about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub translate_px: (f64, f64),
    pub shear: f64,
    pub zoom: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        translate_px: (0.0, 0.0),
        shear: 0.0,
        zoom: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// `p' = c + zoom * R * S * (p + t - c)`, returned as a 2x3 row-major matrix.
    pub fn matrix(&self, width: usize, height: usize) -> [[f64; 3]; 2] {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let z = self.zoom;
        // M = z * R * S with S = [[1, sh], [0, 1]]
        let m = [
            [z * c, z * (c * self.shear - s)],
            [z * s, z * (s * self.shear + c)],
        ];
        let (tx, ty) = self.translate_px;
        let (ux, uy) = (tx - cx, ty - cy);
        [
            [m[0][0], m[0][1], cx + m[0][0] * ux + m[0][1] * uy],
            [m[1][0], m[1][1], cy + m[1][0] * ux + m[1][1] * uy],
        ]
    }
}

pub fn apply_matrix(a: &[[f64; 3]; 2], p: CaliperPoint) -> CaliperPoint {
    CaliperPoint::new(
        a[0][0] * p.x + a[0][1] * p.y + a[0][2],
        a[1][0] * p.x + a[1][1] * p.y + a[1][2],
    )
}

pub fn invert_matrix(a: &[[f64; 3]; 2]) -> Result<[[f64; 3]; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(CaliperError::InvalidInput("singular affine transform".into()));
    }
    let (i00, i01, i10, i11) = (a[1][1] / det, -a[0][1] / det, -a[1][0] / det, a[0][0] / det);
    Ok([
        [i00, i01, -(i00 * a[0][2] + i01 * a[1][2])],
        [i10, i11, -(i10 * a[0][2] + i11 * a[1][2])],
    ])
}

/// One wedge-shaped attenuation patch. Position is relative to the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowPatch {
    /// Apex on the left (`false`) or right (`true`) border.
    pub right_side: bool,
    /// Apex row as a fraction of the image height.
    pub apex_row_frac: f64,
    /// Deviation of the wedge axis from the inward horizontal.
    pub tilt_deg: f64,
    pub opening_deg: f64,
    pub length_px: f64,
    pub attenuation: f64,
    pub falloff_px: f64,
}

impl ShadowPatch {
    pub fn apex(&self, width: usize, height: usize) -> (f64, f64) {
        let x = if self.right_side { width as f64 - 1.0 } else { 0.0 };
        (x, self.apex_row_frac * (height as f64 - 1.0))
    }

    pub fn axis_rad(&self) -> f64 {
        let base = if self.right_side { 180.0 } else { 0.0 };
        (base + self.tilt_deg).to_radians()
    }

    /// Weight in `[0, 1]`: positive strictly inside the sector, zero outside.
    pub fn weight(&self, x: f64, y: f64, width: usize, height: usize) -> f64 {
        let (ax, ay) = self.apex(width, height);
        let (dx, dy) = (x - ax, y - ay);
        let r = dx.hypot(dy);
        if r <= 0.0 || r >= self.length_px {
            return 0.0;
        }
        let mut delta = dy.atan2(dx) - self.axis_rad();
        delta = (delta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        let half = self.opening_deg.to_radians() / 2.0;
        let slack = half - delta.abs();
        if slack <= 0.0 {
            return 0.0;
        }
        let edge = (self.length_px - r).min(r * slack.sin());
        let t = (edge / self.falloff_px.max(1e-9)).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    /// Multiplicative gain at a pixel.
    pub fn gain(&self, x: f64, y: f64, width: usize, height: usize) -> f64 {
        1.0 - (1.0 - self.attenuation) * self.weight(x, y, width, height)
    }
}

/// A normalized line kernel of given orientation in a square support.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub size: usize,
    /// `(dx, dy, weight)` taps relative to the anchor `size / 2`.
    pub taps: Vec<(isize, isize, f32)>,
}

impl BlurKernel {
    pub fn motion(size: usize, angle_deg: f64) -> Self {
        let anchor = (size / 2) as f64;
        let half_len = (size as f64 - 1.0) / 2.0;
        let (s, c) = angle_deg.to_radians().sin_cos();
        let mut taps = Vec::new();
        let mut total = 0.0;
        for ky in 0..size {
            for kx in 0..size {
                let (dx, dy) = (kx as f64 - anchor, ky as f64 - anchor);
                let along = dx * c + dy * s;
                let across = (-dx * s + dy * c).abs();
                if along.abs() > half_len {
                    continue;
                }
                let w = 1.0 - across;
                if w > 0.0 {
                    taps.push((dx as isize, dy as isize, w));
                    total += w;
                }
            }
        }
        BlurKernel {
            size,
            taps: taps.into_iter().map(|(x, y, w)| (x, y, (w / total) as f32)).collect(),
        }
    }

    /// A single centered unit tap.
    pub fn identity(size: usize) -> Self {
        BlurKernel {
            size,
            taps: vec![(0, 0, 1.0)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionBlur {
    pub kernel: usize,
    pub angle_deg: f64,
}

/// One sampled augmentation draw. `seed` and `flags` determine everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub seed: u64,
    pub flags: AugmentFlags,
    pub affine: AffineParams,
    pub speckle_sigma: f64,
    pub resample_factor: Option<f64>,
    pub shadows: Vec<ShadowPatch>,
    pub blur: Option<MotionBlur>,
    pub noise_seed: u64,
}

impl AugmentationSpec {
    pub fn identity(seed: u64) -> Self {
        AugmentationSpec {
            seed,
            flags: AugmentFlags::none(),
            affine: AffineParams::IDENTITY,
            speckle_sigma: 0.0,
            resample_factor: None,
            shadows: Vec::new(),
            blur: None,
            noise_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.affine.is_identity()
            && self.speckle_sigma == 0.0
            && self.resample_factor.is_none()
            && self.shadows.is_empty()
            && self.blur.is_none()
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn signed(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    let v = uniform(rng, range);
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Draws the affine factors. Every range is consumed whether or not the
/// effect is enabled so a flag never shifts the other parameters.
pub fn sample_affine(seed: u64, flags: AugmentFlags, cfg: &AugmentConfig) -> AffineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.apply_probability;
    let draw = |on: bool, rng: &mut ChaCha8Rng| {
        let hit = rng.gen_bool(p);
        on && hit
    };
    let rot_on = draw(flags.rotation, &mut rng);
    let rot = uniform(&mut rng, (-cfg.rotation_deg, cfg.rotation_deg));
    let tr_on = draw(flags.translation, &mut rng);
    let tx = signed(&mut rng, cfg.translate_px);
    let ty = signed(&mut rng, cfg.translate_px);
    let sh_on = draw(flags.shear, &mut rng);
    let sh = uniform(&mut rng, cfg.shear);
    let zo_on = draw(flags.zoom, &mut rng);
    let zo = uniform(&mut rng, cfg.zoom);
    AffineParams {
        rotation_deg: if rot_on { rot } else { 0.0 },
        translate_px: if tr_on { (tx, ty) } else { (0.0, 0.0) },
        shear: if sh_on { sh } else { 0.0 },
        zoom: if zo_on { zo } else { 1.0 },
    }
}

/// Mixes a seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_spec(seed: u64, flags: AugmentFlags, cfg: &AugmentConfig) -> AugmentationSpec {
    let affine = sample_affine(derive_seed(seed, 0), flags, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let p = cfg.apply_probability;

    let mut draw = |on: bool| {
        let hit = rng.gen_bool(p);
        on && hit
    };
    let speckle_on = draw(flags.speckle);
    let resample_on = draw(flags.resolution);
    let shadow_on = draw(flags.shadow);
    let blur_on = draw(flags.blur);
    let resample = uniform(&mut rng, cfg.resample_factor);
    let mut shadows = Vec::new();
    for i in 0..cfg.shadow_patches {
        let patch = ShadowPatch {
            right_side: i % 2 == 1,
            apex_row_frac: rng.gen_range(0.2..=0.8),
            tilt_deg: rng.gen_range(-30.0..=30.0),
            opening_deg: uniform(&mut rng, cfg.shadow_angle_deg),
            length_px: uniform(&mut rng, cfg.shadow_length_px),
            attenuation: uniform(&mut rng, cfg.shadow_attenuation),
            falloff_px: cfg.shadow_falloff_px,
        };
        if shadow_on {
            shadows.push(patch);
        }
    }
    let blur_angle = rng.gen_range(0.0..180.0);
    AugmentationSpec {
        seed,
        flags,
        affine,
        speckle_sigma: if speckle_on { cfg.speckle_sigma } else { 0.0 },
        resample_factor: resample_on.then_some(resample),
        shadows,
        blur: blur_on.then_some(MotionBlur {
            kernel: cfg.blur_kernel,
            angle_deg: blur_angle,
        }),
        noise_seed: derive_seed(seed, 2),
    }
}

/// Inverse-maps every output pixel through `a`; uncovered pixels are 0.
pub fn warp_affine(image: &Raster, a: &[[f64; 3]; 2]) -> Result<Raster> {
    let inv = invert_matrix(a)?;
    let (w, h) = (image.width(), image.height());
    Ok(Raster::from_fn(w, h, |x, y| {
        let src = apply_matrix(&inv, CaliperPoint::new(x as f64, y as f64));
        image.sample_bilinear(src.x, src.y).unwrap_or(0.0)
    }))
}

#[derive(Debug, Clone)]
pub struct GeometricOutcome {
    pub image: Raster,
    pub landmarks: LandmarkSet,
    /// The transform actually applied (identity when rejected).
    pub affine: AffineParams,
    pub attempts: usize,
    pub rejected: bool,
}

/// Warps image and landmarks with the spec's affine transform. If a landmark
/// would leave the canvas the transform is redrawn from derived seeds; after
/// [`MAX_GEOMETRIC_ATTEMPTS`] failures the input is returned unchanged.
pub fn apply_geometric(
    image: &Raster,
    set: &LandmarkSet,
    spec: &AugmentationSpec,
    cfg: &AugmentConfig,
) -> Result<GeometricOutcome> {
    if image.is_empty() {
        return Err(CaliperError::InvalidInput("empty image".into()));
    }
    set.ensure_complete()?;
    let (w, h) = (image.width(), image.height());
    let mut affine = spec.affine;
    for attempt in 1..=MAX_GEOMETRIC_ATTEMPTS {
        if affine.is_identity() {
            return Ok(GeometricOutcome {
                image: image.clone(),
                landmarks: set.clone(),
                affine,
                attempts: attempt,
                rejected: false,
            });
        }
        let m = affine.matrix(w, h);
        let moved = set.map_points(|p| apply_matrix(&m, p));
        if moved.check_bounds(w, h).is_ok() {
            return Ok(GeometricOutcome {
                image: warp_affine(image, &m)?,
                landmarks: moved,
                affine,
                attempts: attempt,
                rejected: false,
            });
        }
        affine = sample_affine(derive_seed(spec.seed, 100 + attempt as u64), spec.flags, cfg);
    }
    Ok(GeometricOutcome {
        image: image.clone(),
        landmarks: set.clone(),
        affine: AffineParams::IDENTITY,
        attempts: MAX_GEOMETRIC_ATTEMPTS,
        rejected: true,
    })
}

/// Multiplicative Gaussian noise: `I * (1 + n)`, clamped to the valid range.
pub fn apply_speckle(image: &Raster, sigma: f64, seed: u64) -> Result<Raster> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| CaliperError::InvalidInput(format!("speckle sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = normal.sample(&mut rng);
        *v = (*v as f64 * (1.0 + n)) as f32;
    }
    out.clamp_intensity();
    Ok(out)
}

fn reflect_coord(v: f64, n: usize) -> f64 {
    let hi = (n - 1) as f64;
    if hi == 0.0 {
        return 0.0;
    }
    let period = 2.0 * hi;
    let m = v.rem_euclid(period);
    if m > hi {
        period - m
    } else {
        m
    }
}

/// Bilinear resize using pixel-center alignment and reflective borders.
pub fn resize_bilinear(image: &Raster, width: usize, height: usize) -> Raster {
    let sx = image.width() as f64 / width as f64;
    let sy = image.height() as f64 / height as f64;
    Raster::from_fn(width, height, |x, y| {
        let u = reflect_coord((x as f64 + 0.5) * sx - 0.5, image.width());
        let v = reflect_coord((y as f64 + 0.5) * sy - 0.5, image.height());
        image.sample_bilinear_clamped(u, v)
    })
}

/// Downsample by `factor`, then upsample back to the original size.
pub fn apply_resolution(image: &Raster, factor: f64) -> Result<Raster> {
    if !(factor.is_finite() && factor > 0.0 && factor <= 1.0) {
        return Err(CaliperError::InvalidInput(format!(
            "resample factor must be in (0, 1], got {factor}"
        )));
    }
    let (w, h) = (image.width(), image.height());
    let sw = ((w as f64 * factor).round() as usize).max(1);
    let sh = ((h as f64 * factor).round() as usize).max(1);
    let small = resize_bilinear(image, sw, sh);
    Ok(resize_bilinear(&small, w, h))
}

pub fn apply_shadow(image: &Raster, patches: &[ShadowPatch]) -> Raster {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for patch in patches {
        for y in 0..h {
            for x in 0..w {
                let g = patch.gain(x as f64, y as f64, w, h);
                if g < 1.0 {
                    let v = out.get(x, y);
                    out.set(x, y, (v as f64 * g) as f32);
                }
            }
        }
    }
    out
}

/// Sparse convolution with reflective borders.
pub fn convolve(image: &Raster, kernel: &BlurKernel) -> Raster {
    let (w, h) = (image.width(), image.height());
    let mut out = Raster::zeros(w, h);
    for &(dx, dy, k) in &kernel.taps {
        // correlation with a point-symmetric kernel equals convolution
        for y in 0..h {
            let sy = Raster::reflect(y as isize + dy, h);
            let row = &image.data()[sy * w..(sy + 1) * w];
            let dst = &mut out.data_mut()[y * w..(y + 1) * w];
            for (x, d) in dst.iter_mut().enumerate() {
                let sx = x as isize + dx;
                let v = if sx >= 0 && (sx as usize) < w {
                    row[sx as usize]
                } else {
                    row[Raster::reflect(sx, w)]
                };
                *d += k * v;
            }
        }
    }
    out.clamp_intensity();
    out
}

pub fn apply_motion_blur(image: &Raster, blur: MotionBlur) -> Raster {
    convolve(image, &BlurKernel::motion(blur.kernel, blur.angle_deg))
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: Raster,
    pub landmarks: LandmarkSet,
    /// The spec with the affine factors actually applied.
    pub spec: AugmentationSpec,
    pub rejected: bool,
}

/// Full pipeline: geometric, then speckle, resolution, shadow, blur.
pub fn augment(
    image: &Raster,
    set: &LandmarkSet,
    flags: AugmentFlags,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<Augmented> {
    let mut spec = sample_spec(seed, flags, cfg);
    let geo = apply_geometric(image, set, &spec, cfg)?;
    spec.affine = geo.affine;
    let mut img = geo.image;
    if spec.speckle_sigma > 0.0 {
        img = apply_speckle(&img, spec.speckle_sigma, spec.noise_seed)?;
    }
    if let Some(f) = spec.resample_factor {
        img = apply_resolution(&img, f)?;
    }
    if !spec.shadows.is_empty() {
        img = apply_shadow(&img, &spec.shadows);
    }
    if let Some(b) = spec.blur {
        img = apply_motion_blur(&img, b);
    }
    Ok(Augmented {
        image: img,
        landmarks: geo.landmarks,
        spec,
        rejected: geo.rejected,
    })
}
