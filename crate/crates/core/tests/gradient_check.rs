//! Analytic gradients of the combined loss vs central finite differences.

use caliper_core::loss::{combined_loss, LossWeights};
use caliper_core::model::{BackboneConfig, UNet};
use caliper_core::nn::Tensor;
use caliper_core::PlaneConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> (UNet<f64>, Tensor<f64>, Vec<f32>, Vec<f32>) {
    let plane = PlaneConfig::tc();
    let cfg = BackboneConfig {
        depth: 2,
        base_channels: 2,
        ..BackboneConfig::for_plane(&plane, 8, 12)
    };
    let net = UNet::<f64>::new(cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_vec(1, 8, 12, (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let th: Vec<f32> = (0..6 * 96).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tm: Vec<f32> = (0..3 * 96).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    (net, x, th, tm)
}

fn loss_of(net: &UNet<f64>, x: &Tensor<f64>, th: &[f32], tm: &[f32], w: LossWeights) -> f64 {
    let (out, _) = net.forward(x).unwrap();
    combined_loss(&out.landmark_logits, &out.constraint_logits, th, tm, w)
        .unwrap()
        .0
        .total
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let (mut net, x, th, tm) = toy();
    let w = LossWeights::new(1e-3).unwrap();
    let (out, cache) = net.forward(&x).unwrap();
    let (_, gh, gc) = combined_loss(&out.landmark_logits, &out.constraint_logits, &th, &tm, w).unwrap();
    net.zero_grad();
    net.backward(&cache, &gh, &gc);
    let analytic: Vec<Vec<f64>> = net
        .layers_mut()
        .into_iter()
        .map(|l| l.grad_weight.clone())
        .collect();

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let n_layers = analytic.len();
    for layer in 0..n_layers {
        let count = analytic[layer].len();
        // sample a few entries per layer to keep the test fast
        for i in (0..count).step_by((count / 7).max(1)) {
            let mut plus = net.clone();
            plus.layers_mut()[layer].weight[i] += eps;
            let mut minus = net.clone();
            minus.layers_mut()[layer].weight[i] -= eps;
            let fd = (loss_of(&plus, &x, &th, &tm, w) - loss_of(&minus, &x, &th, &tm, w)) / (2.0 * eps);
            let a = analytic[layer][i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn bias_gradients_match_finite_differences() {
    let (mut net, x, th, tm) = toy();
    // Nonzero biases keep pre-activations off the ReLU kink.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for l in net.layers_mut() {
        for b in l.bias.iter_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    let w = LossWeights::new(1e-3).unwrap();
    let (out, cache) = net.forward(&x).unwrap();
    let (_, gh, gc) = combined_loss(&out.landmark_logits, &out.constraint_logits, &th, &tm, w).unwrap();
    net.zero_grad();
    net.backward(&cache, &gh, &gc);
    let analytic: Vec<Vec<f64>> = net.layers_mut().into_iter().map(|l| l.grad_bias.clone()).collect();
    // A max-pool or ReLU switch sits within 1e-6 of this point for one bias;
    // the smaller step keeps both probes on the same side of it.
    let eps = 1e-7;
    let mut worst: f64 = 0.0;
    for (layer, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let mut plus = net.clone();
            plus.layers_mut()[layer].bias[i] += eps;
            let mut minus = net.clone();
            minus.layers_mut()[layer].bias[i] -= eps;
            let fd = (loss_of(&plus, &x, &th, &tm, w) - loss_of(&minus, &x, &th, &tm, w)) / (2.0 * eps);
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn logit_patch_gradients_match_finite_differences() {
    // d L / d logits on a 5x5 patch of one landmark channel and one mask channel
    let (net, x, th, tm) = toy();
    let w = LossWeights::new(1e-3).unwrap();
    let (out, _) = net.forward(&x).unwrap();
    let (_, gh, gc) = combined_loss(&out.landmark_logits, &out.constraint_logits, &th, &tm, w).unwrap();
    let eval = |lh: &Tensor<f64>, lc: &Tensor<f64>| combined_loss(lh, lc, &th, &tm, w).unwrap().0.total;
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for y in 1..6 {
        for xx in 2..7 {
            let i = 2 * 96 + y * 12 + xx;
            let mut p = out.landmark_logits.clone();
            p.data[i] += eps;
            let mut m = out.landmark_logits.clone();
            m.data[i] -= eps;
            let fd = (eval(&p, &out.constraint_logits) - eval(&m, &out.constraint_logits)) / (2.0 * eps);
            worst = worst.max((fd - gh.data[i]).abs() / fd.abs().max(1e-12));

            let j = 96 + y * 12 + xx;
            let mut p = out.constraint_logits.clone();
            p.data[j] += eps;
            let mut m = out.constraint_logits.clone();
            m.data[j] -= eps;
            let fd = (eval(&out.landmark_logits, &p) - eval(&out.landmark_logits, &m)) / (2.0 * eps);
            worst = worst.max((fd - gc.data[j]).abs() / fd.abs().max(1e-12));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}
