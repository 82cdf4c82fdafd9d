//! Training targets: per-landmark Gaussian heatmaps and per-biometry line masks.

use crate::error::{CaliperError, Result};
use crate::geometry::{CaliperPoint, LandmarkSet};
use crate::raster::Raster;

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_LINE_WIDTH: f64 = 6.0;

/// One peak-normalized Gaussian channel per landmark, in plane order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub channels: Vec<Raster>,
    pub sigma: f64,
}

/// One binary line mask per biometry pair, in plane order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMaskStack {
    pub channels: Vec<Raster>,
    pub line_width: f64,
}

/// Concatenates channels into one `C x H x W` buffer.
pub fn stack_channels(channels: &[Raster]) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels.iter().map(|c| c.data().len()).sum());
    for c in channels {
        out.extend_from_slice(c.data());
    }
    out
}

impl HeatmapStack {
    pub fn to_tensor_data(&self) -> Vec<f32> {
        stack_channels(&self.channels)
    }
}

impl ConstraintMaskStack {
    pub fn to_tensor_data(&self) -> Vec<f32> {
        stack_channels(&self.channels)
    }
}

fn ordered_in_bounds(set: &LandmarkSet, width: usize, height: usize) -> Result<Vec<CaliperPoint>> {
    set.ensure_complete()?;
    set.check_bounds(width, height)?;
    set.ordered()
}

/// Renders a Gaussian bump centered at `p`, scaled so the grid maximum is 1.
pub fn gaussian_channel(p: CaliperPoint, width: usize, height: usize, sigma: f64) -> Raster {
    let inv = 1.0 / (2.0 * sigma * sigma);
    // The Gaussian is separable; evaluate each axis once.
    let gx: Vec<f64> = (0..width).map(|x| (-(x as f64 - p.x).powi(2) * inv).exp()).collect();
    let gy: Vec<f64> = (0..height).map(|y| (-(y as f64 - p.y).powi(2) * inv).exp()).collect();
    let peak = gx.iter().cloned().fold(0.0, f64::max) * gy.iter().cloned().fold(0.0, f64::max);
    let norm = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Raster::from_fn(width, height, |x, y| (gx[x] * gy[y] * norm) as f32)
}

pub fn encode_heatmaps(set: &LandmarkSet, height: usize, width: usize, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(CaliperError::InvalidInput(format!("sigma must be > 0, got {sigma}")));
    }
    let points = ordered_in_bounds(set, width, height)?;
    Ok(HeatmapStack {
        channels: points
            .into_iter()
            .map(|p| gaussian_channel(p, width, height, sigma))
            .collect(),
        sigma,
    })
}

/// Squared distance from `(px, py)` to the closed segment `a`-`b`.
pub fn segment_distance_sq(px: f64, py: f64, a: CaliperPoint, b: CaliperPoint) -> f64 {
    // Work relative to `a` so integer translations give identical results.
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let (rx, ry) = (px - a.x, py - a.y);
    let len_sq = dx * dx + dy * dy;
    let dot = rx * dx + ry * dy;
    if len_sq == 0.0 || dot <= 0.0 {
        return rx * rx + ry * ry;
    }
    if dot >= len_sq {
        let (ex, ey) = (px - b.x, py - b.y);
        return ex * ex + ey * ey;
    }
    let cross = rx * dy - ry * dx;
    cross * cross / len_sq
}

/// Foreground iff the pixel center is within `line_width / 2` of the segment.
pub fn line_mask(a: CaliperPoint, b: CaliperPoint, width: usize, height: usize, line_width: f64) -> Raster {
    let r_sq = (line_width / 2.0).powi(2);
    Raster::from_fn(width, height, |x, y| {
        if segment_distance_sq(x as f64, y as f64, a, b) <= r_sq {
            1.0
        } else {
            0.0
        }
    })
}

pub fn encode_constraints(
    set: &LandmarkSet,
    height: usize,
    width: usize,
    line_width: f64,
) -> Result<ConstraintMaskStack> {
    if !(line_width.is_finite() && line_width > 0.0) {
        return Err(CaliperError::InvalidInput(format!(
            "line width must be > 0, got {line_width}"
        )));
    }
    ordered_in_bounds(set, width, height)?;
    let mut channels = Vec::with_capacity(set.plane().pair_count());
    for pair in set.plane().biometry_pairs() {
        let a = set.get(&pair.landmark_a).expect("complete set");
        let b = set.get(&pair.landmark_b).expect("complete set");
        channels.push(line_mask(a, b, width, height, line_width));
    }
    Ok(ConstraintMaskStack {
        channels,
        line_width,
    })
}
