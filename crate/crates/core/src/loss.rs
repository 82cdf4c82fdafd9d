//! Combined heatmap + constraint-mask objective: `L = L_H + alpha * L_BCS`,
//! both terms mean per-pixel binary cross-entropy on logits.

use serde::{Deserialize, Serialize};

use crate::error::{CaliperError, Result};
use crate::nn::{Scalar, Tensor};

pub const DEFAULT_ALPHA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: DEFAULT_ALPHA }
    }
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(CaliperError::InvalidInput(format!(
                "loss weight must be finite and >= 0, got {alpha}"
            )));
        }
        Ok(LossWeights { alpha })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub heatmap: f64,
    pub constraint: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE between `sigmoid(logits)` and soft `targets`, plus d(loss)/d(logits)
/// scaled by `weight`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &[f32], weight: f64) -> Result<(f64, Tensor<T>)> {
    if logits.data.len() != targets.len() {
        return Err(CaliperError::Config(format!(
            "logit/target size mismatch: {} vs {}",
            logits.data.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.channels, logits.height, logits.width);
    for ((z, &t), g) in logits.data.iter().zip(targets).zip(grad.data.iter_mut()) {
        let z = z.as_f64();
        if z.is_nan() {
            return Err(CaliperError::TrainingDiverged("NaN in logits".into()));
        }
        let t = t as f64;
        // one exponential serves both the softplus and the sigmoid
        let e = (-z.abs()).exp();
        let p = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        total += z.max(0.0) - z * t + e.ln_1p();
        *g = T::from_f(weight * (p - t) / n);
    }
    Ok((total / n, grad))
}

/// Evaluates the combined loss; gradients are w.r.t. each head's logits.
pub fn combined_loss<T: Scalar>(
    landmark_logits: &Tensor<T>,
    constraint_logits: &Tensor<T>,
    target_heatmaps: &[f32],
    target_masks: &[f32],
    weights: LossWeights,
) -> Result<(LossBreakdown, Tensor<T>, Tensor<T>)> {
    let (lh, gh) = bce_with_logits(landmark_logits, target_heatmaps, 1.0)?;
    let (lc, gc) = bce_with_logits(constraint_logits, target_masks, weights.alpha)?;
    let total = if weights.alpha == 0.0 { lh } else { lh + weights.alpha * lc };
    Ok((
        LossBreakdown {
            total,
            heatmap: lh,
            constraint: lc,
        },
        gh,
        gc,
    ))
}
