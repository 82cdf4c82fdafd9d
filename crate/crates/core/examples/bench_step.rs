use std::time::Instant;

use caliper_core::loss::{combined_loss, LossWeights};
use caliper_core::model::{BackboneConfig, UNet};
use caliper_core::nn::Tensor;
use caliper_core::PlaneConfig;

fn main() {
    let plane = PlaneConfig::tc();
    let base: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let cfg = BackboneConfig { base_channels: base, ..BackboneConfig::for_plane(&plane, 160, 288) };
    let mut net = UNet::<f32>::new(cfg, 1).unwrap();
    println!("params {}", net.parameter_count());
    let x = Tensor::from_vec(1, 160, 288, (0..160 * 288).map(|i| ((i % 97) as f32) / 97.0).collect());
    let th = vec![0.0f32; 6 * 160 * 288];
    let tm = vec![0.0f32; 3 * 160 * 288];
    for _ in 0..2 {
        let t = Instant::now();
        let (out, cache) = net.forward(&x).unwrap();
        let tf = t.elapsed();
        let (_, gh, gc) = combined_loss(&out.landmark_logits, &out.constraint_logits, &th, &tm, LossWeights::default()).unwrap();
        let tl = t.elapsed();
        net.backward(&cache, &gh, &gc);
        println!("fwd {:?} loss {:?} total {:?}", tf, tl - tf, t.elapsed());
    }
}
