//! U-Net style backbone with a landmark-heatmap head and a constraint-mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CaliperError, Result};
use crate::geometry::PlaneConfig;
use crate::nn::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward, relu_inplace, split_channels,
    upsample2, upsample2_backward, Conv2d, Scalar, Tensor,
};

/// Shape contract of the reference backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Number of 2x down/up levels.
    pub depth: usize,
    /// Channels at full resolution; doubled per level.
    pub base_channels: usize,
    pub output_stride: usize,
    pub head_landmark_channels: usize,
    pub head_constraint_channels: usize,
}

impl BackboneConfig {
    /// Reference geometry for a plane: 4 levels, width 8.
    pub fn for_plane(plane: &PlaneConfig, input_height: usize, input_width: usize) -> Self {
        BackboneConfig {
            input_height,
            input_width,
            depth: 4,
            base_channels: 8,
            output_stride: 1,
            head_landmark_channels: plane.landmark_count(),
            head_constraint_channels: plane.pair_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_stride != 1 {
            return Err(CaliperError::Config("output stride must be 1".into()));
        }
        if self.depth == 0 || self.base_channels == 0 {
            return Err(CaliperError::Config("depth and base width must be positive".into()));
        }
        let div = 1usize << self.depth;
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % div != 0
            || self.input_width % div != 0
        {
            return Err(CaliperError::Config(format!(
                "input {}x{} must be a positive multiple of {div} for depth {}",
                self.input_height, self.input_width, self.depth
            )));
        }
        if self.head_landmark_channels == 0 || self.head_constraint_channels == 0 {
            return Err(CaliperError::Config("heads need at least one channel".into()));
        }
        Ok(())
    }

    pub fn check_plane(&self, plane: &PlaneConfig) -> Result<()> {
        if self.head_landmark_channels != plane.landmark_count()
            || self.head_constraint_channels != plane.pair_count()
        {
            return Err(CaliperError::Config(format!(
                "backbone heads ({}, {}) do not match plane {} ({}, {})",
                self.head_landmark_channels,
                self.head_constraint_channels,
                plane.name(),
                plane.landmark_count(),
                plane.pair_count()
            )));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Initial head biases: the targets are mostly zero.
const LANDMARK_HEAD_BIAS: f64 = -4.0;
const CONSTRAINT_HEAD_BIAS: f64 = -3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: BackboneConfig,
    /// Two convs per encoder level, then two for the bottleneck.
    encoder: Vec<[Conv2d<T>; 2]>,
    /// 1x1 projection applied before upsampling, per decoder level.
    up_proj: Vec<Conv2d<T>>,
    decoder: Vec<[Conv2d<T>; 2]>,
    landmark_head: Conv2d<T>,
    constraint_head: Conv2d<T>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    /// Per encoder level (incl. bottleneck): input, first relu out, second relu out.
    enc: Vec<[Tensor<T>; 3]>,
    pool_idx: Vec<Vec<u32>>,
    /// Per decoder step (deepest first): up_proj input, concat, first out, second out.
    dec: Vec<[Tensor<T>; 4]>,
}

pub struct Outputs<T> {
    pub landmark_logits: Tensor<T>,
    pub constraint_logits: Tensor<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut in_ch = 1;
        for level in 0..=config.depth {
            let w = config.width_at(level);
            encoder.push([Conv2d::new(in_ch, w, 3, &mut rng), Conv2d::new(w, w, 3, &mut rng)]);
            in_ch = w;
        }
        let mut up_proj = Vec::new();
        let mut decoder = Vec::new();
        for level in (0..config.depth).rev() {
            let w = config.width_at(level);
            up_proj.push(Conv2d::new(config.width_at(level + 1), w, 1, &mut rng));
            decoder.push([Conv2d::new(2 * w, w, 3, &mut rng), Conv2d::new(w, w, 3, &mut rng)]);
        }
        let w0 = config.width_at(0);
        let mut landmark_head = Conv2d::new(w0, config.head_landmark_channels, 1, &mut rng);
        landmark_head.bias.fill(T::from_f(LANDMARK_HEAD_BIAS));
        let mut constraint_head = Conv2d::new(w0, config.head_constraint_channels, 1, &mut rng);
        constraint_head.bias.fill(T::from_f(CONSTRAINT_HEAD_BIAS));
        Ok(UNet {
            config,
            encoder,
            up_proj,
            decoder,
            landmark_head,
            constraint_head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != (1, self.config.input_height, self.config.input_width) {
            return Err(CaliperError::Config(format!(
                "input of shape {:?} does not match configured 1x{}x{}",
                x.shape(),
                self.config.input_height,
                self.config.input_width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Outputs<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut scratch = Vec::new();
        let mut enc = Vec::with_capacity(self.encoder.len());
        let mut pool_idx = Vec::new();
        let mut cur = x.clone();
        for (level, [c1, c2]) in self.encoder.iter().enumerate() {
            if level > 0 {
                let (p, idx) = max_pool2(&cur);
                pool_idx.push(idx);
                cur = p;
            }
            let mut a = c1.forward(&cur, &mut scratch);
            relu_inplace(&mut a);
            let mut b = c2.forward(&a, &mut scratch);
            relu_inplace(&mut b);
            enc.push([cur, a, b.clone()]);
            cur = b;
        }
        let mut dec = Vec::with_capacity(self.decoder.len());
        for (step, (proj, [c1, c2])) in self.up_proj.iter().zip(&self.decoder).enumerate() {
            let level = self.config.depth - 1 - step;
            let up = upsample2(&proj.forward(&cur, &mut scratch));
            let cat = concat_channels(&up, &enc[level][2]);
            let mut a = c1.forward(&cat, &mut scratch);
            relu_inplace(&mut a);
            let mut b = c2.forward(&a, &mut scratch);
            relu_inplace(&mut b);
            dec.push([cur, cat, a, b.clone()]);
            cur = b;
        }
        let outputs = Outputs {
            landmark_logits: self.landmark_head.forward(&cur, &mut scratch),
            constraint_logits: self.constraint_head.forward(&cur, &mut scratch),
        };
        Ok((outputs, ForwardCache { enc, pool_idx, dec }))
    }

    /// Accumulates parameter gradients for one sample.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_landmark: &Tensor<T>, grad_constraint: &Tensor<T>) {
        let mut scratch = Vec::new();
        let top = &cache.dec.last().map(|d| &d[3]).unwrap_or(&cache.enc[0][2]);
        let mut g = self
            .landmark_head
            .backward(top, grad_landmark, &mut scratch, true)
            .expect("input grad");
        let gc = self
            .constraint_head
            .backward(top, grad_constraint, &mut scratch, true)
            .expect("input grad");
        for (a, b) in g.data.iter_mut().zip(&gc.data) {
            *a += *b;
        }
        let depth = self.config.depth;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for step in (0..depth).rev() {
            let level = depth - 1 - step;
            let [proj_in, cat, a, b] = &cache.dec[step];
            let [c1, c2] = &mut self.decoder[step];
            relu_backward(b, &mut g);
            let mut ga = c2.backward(a, &g, &mut scratch, true).expect("input grad");
            relu_backward(a, &mut ga);
            let gcat = c1.backward(cat, &ga, &mut scratch, true).expect("input grad");
            let up_ch = self.up_proj[step].out_channels;
            let (gup, gskip) = split_channels(&gcat, up_ch);
            skip_grads[level] = Some(gskip);
            let gproj = upsample2_backward(&gup);
            g = self.up_proj[step]
                .backward(proj_in, &gproj, &mut scratch, true)
                .expect("input grad");
        }
        for level in (0..=depth).rev() {
            if let Some(s) = skip_grads.get_mut(level).and_then(Option::take) {
                for (a, b) in g.data.iter_mut().zip(&s.data) {
                    *a += *b;
                }
            }
            let [input, a, b] = &cache.enc[level];
            let [c1, c2] = &mut self.encoder[level];
            relu_backward(b, &mut g);
            let mut ga = c2.backward(a, &g, &mut scratch, true).expect("input grad");
            relu_backward(a, &mut ga);
            let gin = c1.backward(input, &ga, &mut scratch, level > 0);
            if level > 0 {
                let prev = &cache.enc[level - 1][2];
                g = max_pool2_backward(&gin.expect("input grad"), &cache.pool_idx[level - 1], prev.shape());
            }
        }
    }

    fn layers(&self) -> Vec<&Conv2d<T>> {
        let mut v: Vec<&Conv2d<T>> = Vec::new();
        for [a, b] in &self.encoder {
            v.push(a);
            v.push(b);
        }
        for (p, [a, b]) in self.up_proj.iter().zip(&self.decoder) {
            v.push(p);
            v.push(a);
            v.push(b);
        }
        v.push(&self.landmark_head);
        v.push(&self.constraint_head);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v: Vec<&mut Conv2d<T>> = Vec::new();
        for [a, b] in &mut self.encoder {
            v.push(a);
            v.push(b);
        }
        for (p, [a, b]) in self.up_proj.iter_mut().zip(&mut self.decoder) {
            v.push(p);
            v.push(a);
            v.push(b);
        }
        v.push(&mut self.landmark_head);
        v.push(&mut self.constraint_head);
        v
    }

    pub fn zero_grad(&mut self) {
        for l in self.layers_mut() {
            l.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    /// Flat list of named parameter tensors (weights then bias per layer).
    pub fn named_parameters(&self) -> Vec<(String, Vec<usize>, &[T])> {
        self.layers()
            .into_iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (
                        format!("layer{i}.weight"),
                        vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                        l.weight.as_slice(),
                    ),
                    (format!("layer{i}.bias"), vec![l.out_channels], l.bias.as_slice()),
                ]
            })
            .collect()
    }

    /// Overwrites parameters in [`named_parameters`](Self::named_parameters) order.
    pub fn load_parameters(&mut self, values: &[Vec<T>]) -> Result<()> {
        let layers = self.layers_mut();
        if values.len() != 2 * layers.len() {
            return Err(CaliperError::Checkpoint(format!(
                "expected {} tensors, found {}",
                2 * layers.len(),
                values.len()
            )));
        }
        for (l, pair) in layers.into_iter().zip(values.chunks(2)) {
            if pair[0].len() != l.weight.len() || pair[1].len() != l.bias.len() {
                return Err(CaliperError::Checkpoint("tensor size mismatch".into()));
            }
            l.weight.copy_from_slice(&pair[0]);
            l.bias.copy_from_slice(&pair[1]);
        }
        Ok(())
    }
}
