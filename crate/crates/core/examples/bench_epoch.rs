//! Rough throughput check: one supervised epoch at phantom scale.

use std::time::Instant;

use oarseg_core::dataset::{extract_slices, HuWindow};
use oarseg_core::models::unet::{build_generator, GeneratorConfig};
use oarseg_core::optim::AdamState;
use oarseg_core::organs::OrganId;
use oarseg_core::phantom::generate_phantom_dataset;
use oarseg_core::trainer::{train_epoch_supervised, validate, SliceSet, TrainConfig};
use rand::SeedableRng;

fn main() {
    let n_patients: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(8);
    let hw: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(64);

    let t0 = Instant::now();
    let data = generate_phantom_dataset(0, n_patients, (16, hw, hw)).unwrap();
    println!("phantom gen: {:?}", t0.elapsed());

    let window = HuWindow::default();
    let mut samples = Vec::new();
    for (ct, lv, _) in &data {
        samples.extend(extract_slices(ct, lv, OrganId::RightLung, window).unwrap());
    }
    let set = SliceSet::from_samples(samples);
    println!("slices: {}", set.len());

    let cfg = TrainConfig {
        lr0: 3e-3,
        ..Default::default()
    };
    let (graph, mut params) = build_generator(
        GeneratorConfig {
            depth: 3,
            base_channels: 8,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let mut opt = AdamState::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    for epoch in 1..=2 {
        let t = Instant::now();
        let stats =
            train_epoch_supervised(&graph, &mut params, &mut opt, &set, &cfg, cfg.lr0, &mut rng)
                .unwrap();
        let train_t = t.elapsed();
        let t = Instant::now();
        let (vl, vd) = validate(&graph, &params, &set, cfg.batch_size).unwrap();
        println!(
            "epoch {epoch}: train {:?} ({:.1} ms/slice), val {:?}, bce {:.4}, val_loss {:.4}, val_dsc {:.4}",
            train_t,
            train_t.as_secs_f64() * 1000.0 / set.len() as f64,
            t.elapsed(),
            stats.train_bce,
            vl,
            vd
        );
    }
}
