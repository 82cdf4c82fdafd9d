//! Heatmap channel -> subpixel caliper position.
//!
//! A channel is min-max normalized, binarized at a threshold, split into
//! 8-connected components, and the component with the largest summed
//! normalized intensity wins. The caliper is the intensity-weighted
//! barycenter of the winning component.

use crate::error::{CaliperError, Result};
use crate::geometry::{CaliperPoint, LandmarkSet, PlaneConfig};
use crate::raster::Raster;

pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// A thresholded connected region of a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCandidate {
    /// Row-major pixel indices belonging to the component, sorted.
    pub pixels: Vec<usize>,
    /// Sum of normalized channel values over the component.
    pub confidence: f64,
    pub barycenter: CaliperPoint,
}

impl ComponentCandidate {
    /// First pixel in row-major order.
    pub fn origin(&self) -> usize {
        self.pixels[0]
    }

    pub fn mask(&self, width: usize, height: usize) -> Raster {
        let mut m = Raster::zeros(width, height);
        for &i in &self.pixels {
            m.data_mut()[i] = 1.0;
        }
        m
    }
}

/// Min-max normalization to `[0, 1]`.
pub fn normalize_channel(h: &Raster) -> Result<Raster> {
    if h.data().iter().any(|v| !v.is_finite()) {
        return Err(CaliperError::InvalidInput("channel contains non-finite values".into()));
    }
    if h.is_empty() {
        return Err(CaliperError::DegenerateChannel);
    }
    let (lo, hi) = h.min_max();
    if hi <= lo {
        return Err(CaliperError::DegenerateChannel);
    }
    let (lo, range) = (lo as f64, (hi - lo) as f64);
    let data = h
        .data()
        .iter()
        .map(|&v| ((v as f64 - lo) / range) as f32)
        .collect();
    Raster::from_vec(h.width(), h.height(), data)
}

/// Labels 8-connected foreground components. Returns one pixel list per
/// component, ordered by each component's first row-major pixel.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut pixels = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    components
}

/// All thresholded components of a channel, in row-major origin order.
pub fn candidates(h: &Raster, threshold: f64) -> Result<Vec<ComponentCandidate>> {
    let norm = normalize_channel(h)?;
    let (w, ht) = (norm.width(), norm.height());
    let mask: Vec<bool> = norm.data().iter().map(|&v| v as f64 >= threshold).collect();
    Ok(connected_components(&mask, w, ht)
        .into_iter()
        .map(|pixels| {
            let (mut s, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &pixels {
                let v = norm.data()[i] as f64;
                s += v;
                sx += v * (i % w) as f64;
                sy += v * (i / w) as f64;
            }
            ComponentCandidate {
                pixels,
                confidence: s,
                barycenter: CaliperPoint::new(sx / s, sy / s),
            }
        })
        .collect())
}

/// The most confident component; ties go to the smallest row-major origin.
pub fn winning_component(h: &Raster, threshold: f64) -> Result<ComponentCandidate> {
    let mut best: Option<ComponentCandidate> = None;
    // candidates arrive in origin order, so strict > keeps the earliest on ties
    for c in candidates(h, threshold)? {
        if best.as_ref().map_or(true, |b| c.confidence > b.confidence) {
            best = Some(c);
        }
    }
    // the maximum pixel always survives a threshold <= 1
    best.ok_or(CaliperError::DegenerateChannel)
}

pub fn decode_landmark(h: &Raster, threshold: f64) -> Result<CaliperPoint> {
    Ok(winning_component(h, threshold)?.barycenter)
}

/// Per-landmark outcome of decoding a whole stack.
#[derive(Debug, Clone)]
pub struct DecodedStack {
    pub landmarks: LandmarkSet,
    /// Winning-component confidence per decoded landmark, plane order.
    pub confidences: Vec<(String, f64)>,
    /// Landmarks that could not be decoded, with the reason.
    pub failures: Vec<(String, String)>,
}

impl DecodedStack {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn decode_all(channels: &[Raster], plane: &PlaneConfig, threshold: f64) -> Result<DecodedStack> {
    if channels.len() != plane.landmark_count() {
        return Err(CaliperError::Config(format!(
            "plane {} has {} landmarks but {} channels were given",
            plane.name(),
            plane.landmark_count(),
            channels.len()
        )));
    }
    let mut points = std::collections::BTreeMap::new();
    let mut confidences = Vec::new();
    let mut failures = Vec::new();
    for (name, ch) in plane.landmark_names().iter().zip(channels) {
        match winning_component(ch, threshold) {
            Ok(c) => {
                points.insert(name.clone(), c.barycenter);
                confidences.push((name.clone(), c.confidence));
            }
            Err(e) => failures.push((name.clone(), e.to_string())),
        }
    }
    Ok(DecodedStack {
        landmarks: LandmarkSet::partial(plane.clone(), points)?,
        confidences,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::gaussian_channel;
    use proptest::prelude::*;

    #[test]
    fn normalize_maps_max_to_one() {
        let h = Raster::from_vec(3, 1, vec![0.2, 0.7, 0.45]).unwrap();
        let n = normalize_channel(&h).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
        assert!((n.data()[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn normalize_identity_on_unit_range() {
        let h = Raster::from_vec(4, 1, vec![0.0, 1.0, 0.25, 0.5]).unwrap();
        assert_eq!(normalize_channel(&h).unwrap(), h);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let h = Raster::filled(8, 8, 0.3);
        assert!(matches!(normalize_channel(&h), Err(CaliperError::DegenerateChannel)));
        assert!(matches!(decode_landmark(&h, 0.85), Err(CaliperError::DegenerateChannel)));
    }

    #[test]
    fn symmetric_blob_decodes_exactly() {
        let h = gaussian_channel(CaliperPoint::new(50.0, 30.0), 96, 64, 2.0);
        assert_eq!(decode_landmark(&h, 0.85).unwrap(), CaliperPoint::new(50.0, 30.0));
    }

    #[test]
    fn brighter_blob_wins() {
        let a = gaussian_channel(CaliperPoint::new(20.0, 20.0), 96, 64, 2.0);
        let b = gaussian_channel(CaliperPoint::new(70.0, 40.0), 96, 64, 2.0);
        let mut h = Raster::zeros(96, 64);
        for i in 0..h.data().len() {
            h.data_mut()[i] = 0.9 * a.data()[i] + b.data()[i];
        }
        let cands = candidates(&h, 0.85).unwrap();
        assert_eq!(cands.len(), 2);
        // brute force the confidence sums from the thresholded normalized channel
        let n = normalize_channel(&h).unwrap();
        let sum_near = |cx: usize, cy: usize| -> f64 {
            let mut s = 0.0;
            for y in cy - 4..=cy + 4 {
                for x in cx - 4..=cx + 4 {
                    let v = n.get(x, y) as f64;
                    if v >= 0.85 {
                        s += v;
                    }
                }
            }
            s
        };
        let (s_dim, s_bright) = (sum_near(20, 20), sum_near(70, 40));
        assert!(s_bright > s_dim);
        assert!((cands[0].confidence - s_dim).abs() < 1e-9);
        assert!((cands[1].confidence - s_bright).abs() < 1e-9);
        let p = decode_landmark(&h, 0.85).unwrap();
        assert!((p.x - 70.0).abs() < 1e-6 && (p.y - 40.0).abs() < 1e-6);
    }

    #[test]
    fn ties_break_on_row_major_origin() {
        let mut h = Raster::zeros(10, 10);
        h.set(7, 2, 1.0);
        h.set(1, 5, 1.0);
        let c = winning_component(&h, 0.85).unwrap();
        assert_eq!(c.barycenter, CaliperPoint::new(7.0, 2.0));
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let mask = vec![true, false, false, false, true, false, false, false, true];
        assert_eq!(connected_components(&mask, 3, 3).len(), 1);
        let mask = vec![true, false, true, false, false, false, true, false, true];
        assert_eq!(connected_components(&mask, 3, 3).len(), 4);
    }

    #[test]
    fn decode_all_reports_degenerate_channel() {
        let plane = PlaneConfig::tc();
        let mut chans: Vec<Raster> = (0..6)
            .map(|i| gaussian_channel(CaliperPoint::new(10.0 + 12.0 * i as f64, 20.0), 96, 40, 2.0))
            .collect();
        chans[3] = Raster::zeros(96, 40);
        let d = decode_all(&chans, &plane, 0.85).unwrap();
        assert_eq!(d.landmarks.points().len(), 5);
        assert_eq!(d.failures.len(), 1);
        assert_eq!(d.failures[0].0, "CMS_2");
        assert!(!d.is_complete());
    }

    #[test]
    fn decode_all_channel_mismatch() {
        let chans = vec![Raster::zeros(8, 8); 5];
        assert!(matches!(
            decode_all(&chans, &PlaneConfig::tc(), 0.85),
            Err(CaliperError::Config(_))
        ));
    }

    fn noisy_channel() -> impl Strategy<Value = Raster> {
        (prop::collection::vec(0.0f32..1.0, 24 * 16), 0usize..24, 0usize..16).prop_map(|(v, x, y)| {
            let mut r = Raster::from_vec(24, 16, v).unwrap();
            // a strong peak so the winner is well defined
            r.set(x, y, 3.0);
            r
        })
    }

    proptest! {
        #[test]
        fn normalize_matches_formula(v in prop::collection::vec(-50.0f32..50.0, 2..200)) {
            let n = v.len();
            let h = Raster::from_vec(n, 1, v.clone()).unwrap();
            let lo = v.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            prop_assume!(hi > lo);
            let out = normalize_channel(&h).unwrap();
            for (o, x) in out.data().iter().zip(&v) {
                prop_assert!((*o as f64 - (*x as f64 - lo) / (hi - lo)).abs() < 1e-6);
            }
        }

        #[test]
        fn threshold_set_never_empty(v in prop::collection::vec(-5.0f32..5.0, 2..100), t in 0.0f64..=1.0) {
            let h = Raster::from_vec(v.len(), 1, v.clone()).unwrap();
            let constant = v.iter().all(|x| *x == v[0]);
            prop_assert_eq!(decode_landmark(&h, t).is_ok(), !constant);
        }

        #[test]
        fn winner_invariant_under_affine_rescale(h in noisy_channel(), a in 0.05f32..20.0, b in -5.0f32..5.0) {
            let scaled = Raster::from_vec(24, 16, h.data().iter().map(|v| a * v + b).collect()).unwrap();
            // f32 rounding of a*h+b can move values sitting right at the threshold
            let n = normalize_channel(&h).unwrap();
            prop_assume!(n.data().iter().all(|v| (*v as f64 - 0.85).abs() > 1e-4));
            let w0 = winning_component(&h, 0.85).unwrap();
            let w1 = winning_component(&scaled, 0.85).unwrap();
            prop_assert_eq!(&w0.pixels, &w1.pixels);
            prop_assert!((w0.barycenter.x - w1.barycenter.x).abs() < 1e-4);
            prop_assert!((w0.barycenter.y - w1.barycenter.y).abs() < 1e-4);
        }

        #[test]
        fn power_of_two_rescale_is_exact(h in noisy_channel(), k in -6i32..6) {
            let a = 2f32.powi(k);
            let scaled = Raster::from_vec(24, 16, h.data().iter().map(|v| a * v).collect()).unwrap();
            let w0 = winning_component(&h, 0.85).unwrap();
            let w1 = winning_component(&scaled, 0.85).unwrap();
            prop_assert_eq!(w0, w1);
        }
    }
}
