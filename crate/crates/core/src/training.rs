//! Training loop: augment, encode targets, forward, combined loss, Adam step.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment, derive_seed, resize_bilinear, AugmentConfig, AugmentFlags};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::dataset::{consensus, Manifest, Split};
use crate::decoding::{decode_all, DEFAULT_THRESHOLD};
use crate::encoding::{encode_constraints, encode_heatmaps, DEFAULT_LINE_WIDTH, DEFAULT_SIGMA};
use crate::error::{CaliperError, Result};
use crate::geometry::{CaliperPoint, LandmarkSet, PixelSpacing, PlaneConfig};
use crate::loss::{combined_loss, sigmoid, LossWeights, DEFAULT_ALPHA};
use crate::model::{BackboneConfig, UNet};
use crate::nn::{Conv2d, Tensor};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub plane: String,
    pub input_height: usize,
    pub input_width: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub line_width: f64,
    pub alpha: f64,
    /// Biometric-constraint supervision; off sets the mask-loss weight to zero.
    pub bcs: bool,
    pub augmentation: AugmentFlags,
    /// Ranges at the reference width; rescaled to `input_width` at train time.
    pub augment_config: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            plane: "TC".into(),
            input_height: 160,
            input_width: 288,
            depth: 4,
            base_channels: 8,
            learning_rate: 1e-4,
            epochs: 150,
            batch_size: 1,
            sigma: DEFAULT_SIGMA,
            line_width: DEFAULT_LINE_WIDTH,
            alpha: DEFAULT_ALPHA,
            bcs: true,
            augmentation: AugmentFlags::all(),
            augment_config: AugmentConfig::default(),
            seed: 0,
        }
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    use serde_json::Value;
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl TrainConfig {
    /// `self` with the fields present in a JSON object replaced, recursively.
    pub fn overlay_json(&self, text: &str) -> Result<Self> {
        let overlay: serde_json::Value = serde_json::from_str(text)?;
        if !overlay.is_object() {
            return Err(CaliperError::Config("training configuration must be a JSON object".into()));
        }
        let mut value = serde_json::to_value(self)?;
        merge_json(&mut value, overlay);
        serde_json::from_value(value).map_err(|e| CaliperError::Config(e.to_string()))
    }

    pub fn plane_config(&self) -> Result<PlaneConfig> {
        PlaneConfig::by_name(&self.plane)
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let plane = self.plane_config()?;
        let cfg = BackboneConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            ..BackboneConfig::for_plane(&plane, self.input_height, self.input_width)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(if self.bcs { self.alpha } else { 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone()?;
        self.loss_weights()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CaliperError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(CaliperError::Config("batch size must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.line_width > 0.0) {
            return Err(CaliperError::Config("sigma and line width must be positive".into()));
        }
        Ok(())
    }
}

/// One training or validation image at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub image: Raster,
    pub landmarks: LandmarkSet,
    pub spacing: PixelSpacing,
}

/// Maps a point between canvases under pixel-center alignment.
pub fn rescale_point(p: CaliperPoint, from: (usize, usize), to: (usize, usize)) -> CaliperPoint {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    CaliperPoint::new((p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5)
}

/// Resizes image, landmarks and spacing to `width x height`; a no-op at matching size.
pub fn fit_to_input(
    image: &Raster,
    set: &LandmarkSet,
    spacing: PixelSpacing,
    width: usize,
    height: usize,
) -> Result<(Raster, LandmarkSet, PixelSpacing)> {
    let from = (image.width(), image.height());
    if from == (width, height) {
        return Ok((image.clone(), set.clone(), spacing));
    }
    let img = resize_bilinear(image, width, height);
    let lm = set.map_points(|p| rescale_point(p, from, (width, height)));
    let sp = PixelSpacing::new(
        spacing.mm_per_px_x() * from.0 as f64 / width as f64,
        spacing.mm_per_px_y() * from.1 as f64 / height as f64,
    )?;
    Ok((img, lm, sp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl TrainingData {
    pub fn new(train: Vec<Sample>, validation: Vec<Sample>) -> Result<Self> {
        if train.is_empty() {
            return Err(CaliperError::InvalidInput("empty training set".into()));
        }
        let ids: BTreeSet<&str> = train.iter().map(|s| s.subject_id.as_str()).collect();
        if let Some(s) = validation.iter().find(|s| ids.contains(s.subject_id.as_str())) {
            return Err(CaliperError::InvalidInput(format!(
                "subject {} appears in both training and validation splits",
                s.subject_id
            )));
        }
        Ok(TrainingData { train, validation })
    }

    /// Loads the train and validation splits with consensus ground truth.
    pub fn from_manifest(manifest: &Manifest, config: &TrainConfig) -> Result<Self> {
        let plane = config.plane_config()?;
        let load = |split: Split| -> Result<Vec<Sample>> {
            manifest
                .split(split)
                .map(|e| {
                    if e.plane != plane.name() {
                        return Err(CaliperError::Config(format!(
                            "{} is plane {} but training plane is {}",
                            e.subject_id,
                            e.plane,
                            plane.name()
                        )));
                    }
                    let image = manifest.load_image(e)?;
                    let truth = consensus(e)?;
                    let (image, landmarks, spacing) =
                        fit_to_input(&image, &truth, e.spacing, config.input_width, config.input_height)?;
                    Ok(Sample {
                        subject_id: e.subject_id.clone(),
                        image,
                        landmarks,
                        spacing,
                    })
                })
                .collect()
        };
        Self::new(load(Split::Train)?, load(Split::Validation)?)
    }
}

/// Zero-mean, unit-variance copy of the image as a network input.
pub fn standardize(image: &Raster) -> Tensor<f32> {
    let mean = image.mean();
    let var = image.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / image.data().len() as f64;
    let inv = 1.0 / var.sqrt().max(1e-6);
    Tensor::from_vec(
        1,
        image.height(),
        image.width(),
        image.data().iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect(),
    )
}

/// Adam with bias correction; state per layer as `(m_w, v_w, m_b, v_b)`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: Vec<[Vec<f32>; 4]>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, layers: Vec<&mut Conv2d<f32>>) {
        if self.state.is_empty() {
            self.state = layers
                .iter()
                .map(|l| {
                    [
                        vec![0.0; l.weight.len()],
                        vec![0.0; l.weight.len()],
                        vec![0.0; l.bias.len()],
                        vec![0.0; l.bias.len()],
                    ]
                })
                .collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.learning_rate * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let lr_t = lr_t as f32;
        // eps is applied to the bias-corrected second moment
        let eps_hat = eps * (1.0 - self.beta2.powi(t)).sqrt() as f32;
        let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps_hat);
            }
        };
        for (l, [mw, vw, mb, vb]) in layers.into_iter().zip(self.state.iter_mut()) {
            update(&mut l.weight, &l.grad_weight, mw, vw);
            update(&mut l.bias, &l.grad_bias, mb, vb);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_heatmap_loss: f64,
    pub train_constraint_loss: f64,
    pub validation_loss: Option<f64>,
    pub validation_error_px: Option<f64>,
    pub validation_error_mm: Option<f64>,
    /// Landmarks that failed to decode on the validation split.
    pub validation_failures: usize,
    pub augment_rejections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub loss: f64,
    pub error_px: Option<f64>,
    pub error_mm: Option<f64>,
    pub failures: usize,
}

/// Encoded targets for one sample.
pub fn targets(set: &LandmarkSet, config: &TrainConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    let h = encode_heatmaps(set, config.input_height, config.input_width, config.sigma)?;
    let m = encode_constraints(set, config.input_height, config.input_width, config.line_width)?;
    Ok((h.to_tensor_data(), m.to_tensor_data()))
}

/// Sigmoid probability rasters of the landmark head.
pub fn landmark_probabilities(logits: &Tensor<f32>) -> Vec<Raster> {
    (0..logits.channels)
        .map(|c| {
            let data = logits.channel(c).iter().map(|&z| sigmoid(z as f64) as f32).collect();
            Raster::from_vec(logits.width, logits.height, data).expect("channel size")
        })
        .collect()
}

pub fn validate_model(net: &UNet<f32>, samples: &[Sample], config: &TrainConfig) -> Result<ValidationMetrics> {
    let plane = config.plane_config()?;
    let weights = config.loss_weights()?;
    let mut loss = 0.0;
    let mut px = Vec::new();
    let mut mm = Vec::new();
    let mut failures = 0;
    for s in samples {
        let (out, _) = net.forward(&standardize(&s.image))?;
        let (th, tm) = targets(&s.landmarks, config)?;
        let (b, _, _) = combined_loss(&out.landmark_logits, &out.constraint_logits, &th, &tm, weights)?;
        loss += b.total;
        let decoded = decode_all(&landmark_probabilities(&out.landmark_logits), &plane, DEFAULT_THRESHOLD)?;
        failures += decoded.failures.len();
        for (name, p) in decoded.landmarks.points() {
            let gt = s.landmarks.get(name).expect("complete ground truth");
            px.push(p.distance_px(&gt));
            mm.push(crate::geometry::biometry_length(*p, gt, s.spacing)?);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(ValidationMetrics {
        loss: if samples.is_empty() { 0.0 } else { loss / samples.len() as f64 },
        error_px: mean(&px),
        error_mm: mean(&mm),
        failures,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation weights (last epoch when there is no validation split).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

fn is_better(candidate: &EpochMetrics, incumbent: Option<&EpochMetrics>) -> bool {
    let Some(inc) = incumbent else { return true };
    let key = |m: &EpochMetrics| (m.validation_failures, m.validation_error_px.unwrap_or(f64::INFINITY));
    let (cf, ce) = key(candidate);
    let (inf, ie) = key(inc);
    cf < inf || (cf == inf && ce < ie)
}

/// Trains from scratch. `on_epoch` sees every epoch's metrics as they are produced.
pub fn train(data: &TrainingData, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    config.validate()?;
    let plane = config.plane_config()?;
    let backbone = config.backbone()?;
    for s in data.train.iter().chain(&data.validation) {
        if (s.image.width(), s.image.height()) != (config.input_width, config.input_height) {
            return Err(CaliperError::Config(format!(
                "{} is {}x{}, expected {}x{}",
                s.subject_id,
                s.image.width(),
                s.image.height(),
                config.input_width,
                config.input_height
            )));
        }
        if s.landmarks.plane().name() != plane.name() {
            return Err(CaliperError::Config(format!("{} has plane {}", s.subject_id, s.landmarks.plane().name())));
        }
    }
    TrainingData::new(data.train.clone(), data.validation.clone())?;
    let weights = config.loss_weights()?;
    let aug_cfg = config.augment_config.scaled_for_width(config.input_width);
    let mut net = UNet::<f32>::new(backbone.clone(), derive_seed(config.seed, 1))?;
    let mut adam = Adam::new(config.learning_rate);
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(UNet<f32>, usize)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..config.epochs {
        let epoch_seed = derive_seed(config.seed, 1_000 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let (mut total, mut lh, mut lc) = (0.0, 0.0, 0.0);
        let mut rejections = 0;
        for batch in order.chunks(config.batch_size) {
            net.zero_grad();
            for &i in batch {
                let s = &data.train[i];
                let (image, landmarks) = if config.augmentation.any() {
                    let a = augment(&s.image, &s.landmarks, config.augmentation, derive_seed(epoch_seed, i as u64), &aug_cfg)?;
                    rejections += a.rejected as usize;
                    (a.image, a.landmarks)
                } else {
                    (s.image.clone(), s.landmarks.clone())
                };
                let (th, tm) = targets(&landmarks, config)?;
                let (out, cache) = net.forward(&standardize(&image))?;
                let (b, mut gh, mut gc) = combined_loss(&out.landmark_logits, &out.constraint_logits, &th, &tm, weights)?;
                if !b.total.is_finite() {
                    return Err(CaliperError::TrainingDiverged(format!("loss {} at epoch {epoch}", b.total)));
                }
                let scale = 1.0 / batch.len() as f32;
                gh.data.iter_mut().for_each(|g| *g *= scale);
                gc.data.iter_mut().for_each(|g| *g *= scale);
                net.backward(&cache, &gh, &gc);
                total += b.total;
                lh += b.heatmap;
                lc += b.constraint;
            }
            adam.step(net.layers_mut());
        }
        let n = data.train.len() as f64;
        let val = if data.validation.is_empty() {
            None
        } else {
            Some(validate_model(&net, &data.validation, config)?)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: total / n,
            train_heatmap_loss: lh / n,
            train_constraint_loss: lc / n,
            validation_loss: val.as_ref().map(|v| v.loss),
            validation_error_px: val.as_ref().and_then(|v| v.error_px),
            validation_error_mm: val.as_ref().and_then(|v| v.error_mm),
            validation_failures: val.as_ref().map_or(0, |v| v.failures),
            augment_rejections: rejections,
        };
        on_epoch(&metrics);
        let improved = data.validation.is_empty() || is_better(&metrics, best.as_ref().map(|(_, e)| &history[*e]));
        history.push(metrics);
        if improved {
            best = Some((net.clone(), epoch));
        }
    }

    let header = |best_epoch: Option<usize>| CheckpointHeader::new(plane.clone(), backbone.clone(), config.clone(), history.clone(), best_epoch);
    let last_epoch = config.epochs.checked_sub(1);
    let (best_net, best_epoch) = match best {
        Some((n, e)) => (n, Some(e)),
        None => (net.clone(), last_epoch),
    };
    Ok(TrainOutcome {
        best: Checkpoint::new(header(best_epoch), best_net)?,
        last: Checkpoint::new(header(last_epoch), net)?,
        history,
    })
}

/// Output of a single inference call, in the caller's image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub plane: String,
    pub landmarks: BTreeMap<String, CaliperPoint>,
    pub biometry_mm: BTreeMap<String, f64>,
    pub confidences: BTreeMap<String, f64>,
    pub failures: BTreeMap<String, String>,
}

impl Inference {
    pub fn landmark_set(&self) -> Result<LandmarkSet> {
        LandmarkSet::partial(PlaneConfig::by_name(&self.plane)?, self.landmarks.clone())
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// forward, sigmoid, decode, measure. Images of a different size are resized
/// for the network and the landmarks mapped back.
pub fn infer(checkpoint: &Checkpoint, image: &Raster, spacing: PixelSpacing, plane: &PlaneConfig) -> Result<Inference> {
    let ck_plane = &checkpoint.header.plane;
    if ck_plane.name() != plane.name() || ck_plane.landmark_names() != plane.landmark_names() {
        return Err(CaliperError::Config(format!(
            "checkpoint was trained for plane {} but {} was requested",
            ck_plane.name(),
            plane.name()
        )));
    }
    let cfg = checkpoint.model.config();
    let (w, h) = (cfg.input_width, cfg.input_height);
    let from = (image.width(), image.height());
    let net_image = if from == (w, h) {
        image.clone()
    } else {
        resize_bilinear(image, w, h)
    };
    let (out, _) = checkpoint.model.forward(&standardize(&net_image))?;
    let decoded = decode_all(&landmark_probabilities(&out.landmark_logits), plane, DEFAULT_THRESHOLD)?;
    let landmarks: BTreeMap<String, CaliperPoint> = decoded
        .landmarks
        .points()
        .iter()
        .map(|(k, p)| (k.clone(), rescale_point(*p, (w, h), from)))
        .collect();
    let mut biometry_mm = BTreeMap::new();
    for pair in plane.biometry_pairs() {
        if let (Some(a), Some(b)) = (landmarks.get(&pair.landmark_a), landmarks.get(&pair.landmark_b)) {
            biometry_mm.insert(pair.name.clone(), crate::geometry::biometry_length(*a, *b, spacing)?);
        }
    }
    Ok(Inference {
        plane: plane.name().to_string(),
        landmarks,
        biometry_mm,
        confidences: decoded.confidences.into_iter().collect(),
        failures: decoded.failures.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_dataset, DatasetConfig};

    #[test]
    fn overlay_replaces_only_given_fields() {
        let base = TrainConfig::default();
        let c = base.overlay_json(r#"{"epochs": 3, "augmentation": {"blur": false}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.augmentation.blur && c.augmentation.shadow);
        assert_eq!(TrainConfig { epochs: 150, augmentation: AugmentFlags::all(), ..c }, base);
        assert!(matches!(base.overlay_json("[1]"), Err(CaliperError::Config(_))));
        assert!(matches!(base.overlay_json(r#"{"epochs": "many"}"#), Err(CaliperError::Config(_))));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            input_height: 64,
            input_width: 96,
            depth: 2,
            base_channels: 4,
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n: usize, config: &TrainConfig) -> TrainingData {
        let ds = DatasetConfig {
            plane: config.plane.clone(),
            width: config.input_width,
            height: config.input_height,
            ..DatasetConfig::default()
        };
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (e, image) in build_dataset(n, 17, &ds).unwrap() {
            let s = Sample {
                landmarks: consensus(&e).unwrap(),
                subject_id: e.subject_id,
                image,
                spacing: e.spacing,
            };
            if e.split == Split::Train { train.push(s) } else { val.push(s) }
        }
        TrainingData::new(train, val).unwrap()
    }

    #[test]
    fn adam_matches_reference_update() {
        // single scalar parameter, hand-computed first two steps
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::<f32>::new(1, 1, 1, &mut rng);
        conv.weight[0] = 1.0;
        conv.grad_weight[0] = 0.5;
        let mut adam = Adam::new(0.1);
        adam.step(vec![&mut conv]);
        // m_hat = g, v_hat = g^2 -> step = lr * g / |g|
        assert!((conv.weight[0] - 0.9).abs() < 1e-6);
        conv.grad_weight[0] = -0.5;
        adam.step(vec![&mut conv]);
        let m = 0.9f64 * 0.05 + 0.1 * -0.5;
        let v = 0.999f64 * 0.00025 + 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = 0.9 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((conv.weight[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn one_epoch_twice_is_identical() {
        let cfg = tiny_config();
        let data = tiny_data(4, &cfg);
        let a = train(&data, &cfg, |_| {}).unwrap();
        let b = train(&data, &cfg, |_| {}).unwrap();
        assert!((a.history[0].train_loss - b.history[0].train_loss).abs() < 1e-6);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best.model, b.best.model);
    }

    #[test]
    fn loss_decreases_over_fifty_epochs() {
        let cfg = TrainConfig {
            epochs: 50,
            augmentation: AugmentFlags::none(),
            ..tiny_config()
        };
        let data = tiny_data(4, &cfg);
        let out = train(&data, &cfg, |_| {}).unwrap();
        assert!(out.history[49].train_loss < out.history[0].train_loss);
    }

    #[test]
    fn subject_overlap_and_empty_set_rejected() {
        let cfg = tiny_config();
        let data = tiny_data(4, &cfg);
        let mut val = data.validation.clone();
        val.push(data.train[0].clone());
        assert!(TrainingData::new(data.train.clone(), val).is_err());
        assert!(TrainingData::new(vec![], data.validation.clone()).is_err());
        let bad = TrainingData {
            train: data.train.clone(),
            validation: vec![data.train[0].clone()],
        };
        assert!(train(&bad, &cfg, |_| {}).is_err());
    }

    #[test]
    fn no_bcs_zeroes_mask_weight() {
        let cfg = TrainConfig { bcs: false, ..tiny_config() };
        assert_eq!(cfg.loss_weights().unwrap().alpha, 0.0);
        assert_eq!(tiny_config().loss_weights().unwrap().alpha, 1e-3);
    }

    #[test]
    fn infer_is_deterministic_and_checks_plane() {
        let cfg = tiny_config();
        let data = tiny_data(3, &cfg);
        let out = train(&data, &cfg, |_| {}).unwrap();
        let s = &data.validation[0];
        let a = infer(&out.best, &s.image, s.spacing, &PlaneConfig::tc()).unwrap();
        let b = infer(&out.best, &s.image, s.spacing, &PlaneConfig::tc()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.landmarks.len() + a.failures.len(), 6);
        assert!(matches!(infer(&out.best, &s.image, s.spacing, &PlaneConfig::tv()), Err(CaliperError::Config(_))));
    }

    #[test]
    fn infer_maps_back_to_original_resolution() {
        let cfg = tiny_config();
        let data = tiny_data(3, &cfg);
        let out = train(&data, &cfg, |_| {}).unwrap();
        let s = &data.validation[0];
        let big = resize_bilinear(&s.image, 192, 128);
        let direct = infer(&out.best, &resize_bilinear(&big, 96, 64), s.spacing, &PlaneConfig::tc()).unwrap();
        let large = infer(&out.best, &big, s.spacing, &PlaneConfig::tc()).unwrap();
        assert_eq!(direct.landmarks.len(), large.landmarks.len());
        for (k, p) in &direct.landmarks {
            let expected = rescale_point(*p, (96, 64), (192, 128));
            assert!(large.landmarks[k].distance_px(&expected) < 1e-9);
        }
    }

    #[test]
    fn rescale_point_round_trips() {
        let p = CaliperPoint::new(13.25, 40.5);
        let q = rescale_point(rescale_point(p, (96, 64), (288, 160)), (288, 160), (96, 64));
        assert!(p.distance_px(&q) < 1e-12);
        assert_eq!(rescale_point(p, (96, 64), (96, 64)), p);
    }

    #[test]
    fn standardize_is_zero_mean_unit_variance() {
        let r = Raster::from_fn(10, 7, |x, y| (x * y) as f32 / 70.0);
        let t = standardize(&r);
        let n = t.data.len() as f64;
        let mean = t.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        assert!(standardize(&Raster::filled(4, 4, 0.3)).data.iter().all(|v| *v == 0.0));
    }
}
