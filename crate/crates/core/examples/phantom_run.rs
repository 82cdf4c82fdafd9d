//! Trains on in-memory phantoms and reports held-out decode error.
//! usage: phantom_run PLANE EPOCHS BATCH LR BASE [da] [bcs]
use caliper_core::augmentation::AugmentFlags;
use caliper_core::dataset::{consensus, Split};
use caliper_core::phantom::{build_dataset, DatasetConfig};
use caliper_core::training::{infer, train, Sample, TrainConfig, TrainingData};
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let plane = a[1].clone();
    let epochs: usize = a[2].parse().unwrap();
    let batch: usize = a[3].parse().unwrap();
    let lr: f64 = a[4].parse().unwrap();
    let base: usize = a[5].parse().unwrap();
    let da = a.get(6).map_or(true, |s| s == "1");
    let bcs = a.get(7).map_or(true, |s| s == "1");
    let ds = DatasetConfig { plane: plane.clone(), test_count: 40, ..DatasetConfig::default() };
    let mut tr = Vec::new();
    let mut va = Vec::new();
    let mut te = Vec::new();
    for (e, image) in build_dataset(200, 7, &ds).unwrap() {
        let s = Sample { landmarks: consensus(&e).unwrap(), subject_id: e.subject_id.clone(), image, spacing: e.spacing };
        match e.split { Split::Train => tr.push(s), Split::Validation => va.push(s), Split::Test => te.push(s) }
    }
    let cfg = TrainConfig {
        plane, epochs, batch_size: batch, learning_rate: lr, base_channels: base, seed: 1,
        augmentation: if da { AugmentFlags::all() } else { AugmentFlags::none() }, bcs,
        ..TrainConfig::default()
    };
    let data = TrainingData::new(tr, va).unwrap();
    let t0 = Instant::now();
    let out = train(&data, &cfg, |m| {
        println!("ep {:3} t {:6.0}s loss {:.5} lh {:.5} lc {:.4} val {:?} px {:?} fail {}",
            m.epoch, t0.elapsed().as_secs_f64(), m.train_loss, m.train_heatmap_loss, m.train_constraint_loss,
            m.validation_loss, m.validation_error_px, m.validation_failures);
    }).unwrap();
    let mut errs = Vec::new();
    for s in &te {
        let inf = infer(&out.best, &s.image, s.spacing, s.landmarks.plane()).unwrap();
        for (k, p) in &inf.landmarks { errs.push(p.distance_px(&s.landmarks.get(k).unwrap())); }
    }
    let n = errs.len();
    println!("test mean px {:.3} over {} decoded, total {:.0}s", errs.iter().sum::<f64>() / n as f64, n, t0.elapsed().as_secs_f64());
}
