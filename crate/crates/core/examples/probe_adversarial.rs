//! Probes adversarial stability at phantom scale: supervised vs the three
//! critics on the heart task, across adversarial weights.

use oarseg_core::dataset::{extract_slices, split_dataset, HuWindow};
use oarseg_core::experiment::evaluate_model;
use oarseg_core::models::critic::{build_discriminator, DiscriminatorConfig};
use oarseg_core::models::unet::{build_generator, GeneratorConfig};
use oarseg_core::models::{DiscriminatorKind, Parameters};
use oarseg_core::organs::OrganId;
use oarseg_core::phantom::generate_phantom_dataset;
use oarseg_core::trainer::{fit, SliceSet, TrainConfig, TrainMode};

fn main() {
    let data: Vec<_> = generate_phantom_dataset(700, 10, (16, 32, 32))
        .unwrap()
        .into_iter()
        .map(|(ct, lv, _)| (ct, lv))
        .collect();
    let ids: Vec<String> = data.iter().map(|(ct, _)| ct.patient_id.clone()).collect();
    let split = split_dataset(&ids, 700).unwrap();
    let window = HuWindow::default();
    let build = |ids: &[String]| {
        let mut samples = Vec::new();
        for id in ids {
            let (ct, lv) = data.iter().find(|(ct, _)| &ct.patient_id == id).unwrap();
            samples.extend(extract_slices(ct, lv, OrganId::Heart, window).unwrap());
        }
        SliceSet::from_samples(samples)
    };
    let (train, val, test) = (build(&split.train_ids), build(&split.val_ids), build(&split.test_ids));

    let gen_cfg = GeneratorConfig {
        depth: 3,
        base_channels: 8,
        ..Default::default()
    };
    let base_cfg = TrainConfig {
        lr0: 2e-3,
        max_epochs: 10,
        seed: 700,
        ..Default::default()
    };
    let graph = oarseg_core::models::unet::UNetGraph {
        config: gen_cfg,
        block: oarseg_core::models::unet::BlockKind::ConvPair,
    };
    let test_dsc = |params: &Parameters| {
        let rows = evaluate_model(&graph, params, &test, (1.0, 1.0), 8).unwrap();
        rows.iter().map(|(_, d, _)| *d).sum::<f64>() / rows.len() as f64
    };

    let (g, init) = build_generator(gen_cfg, 700).unwrap();
    let t0 = std::time::Instant::now();
    let sup = fit(&g, init.clone(), None, &train, &val, &base_cfg).unwrap();
    let sup_dsc = test_dsc(&sup.best_params);
    println!("supervised: test DSC {sup_dsc:.4}, best epoch {}, {:?}", sup.best_epoch, t0.elapsed());

    for adv_weight in [1.0, 0.3, 0.05] {
        for kind in DiscriminatorKind::ALL {
            let cfg = TrainConfig {
                mode: TrainMode::Adversarial,
                discriminator: Some(kind),
                adv_weight,
                weight_clip: Some(0.05),
                ..base_cfg.clone()
            };
            let (critic, cp) = build_discriminator(
                DiscriminatorConfig {
                    kind,
                    base_channels: 4,
                    leaky_slope: 0.2,
                },
                701,
            );
            let t0 = std::time::Instant::now();
            match fit(&g, init.clone(), Some((&critic, cp)), &train, &val, &cfg) {
                Ok(res) => {
                    let dsc = test_dsc(&res.best_params);
                    let first = res.run.history.first().unwrap().train_bce;
                    let best = res
                        .run
                        .history
                        .iter()
                        .take_while(|r| r.epoch <= res.best_epoch)
                        .map(|r| r.train_bce)
                        .fold(f64::INFINITY, f64::min);
                    println!(
                        "w={adv_weight} {}: test DSC {dsc:.4} (gap {:+.4}), bce {first:.4}->{best:.4}, epochs {}, {:?}",
                        kind.name(),
                        dsc - sup_dsc,
                        res.run.epoch,
                        t0.elapsed()
                    );
                }
                Err(e) => println!("w={adv_weight} {}: FAILED: {e}", kind.name()),
            }
        }
    }
}
