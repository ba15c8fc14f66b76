//! Probes binary training on the thin tube organs across scales and lrs.

use oarseg_core::dataset::{extract_slices, split_dataset, HuWindow};
use oarseg_core::experiment::evaluate_model;
use oarseg_core::models::unet::{build_generator, GeneratorConfig};
use oarseg_core::organs::OrganId;
use oarseg_core::phantom::generate_phantom_dataset;
use oarseg_core::trainer::{fit, SliceSet, TrainConfig};

fn main() {
    for (hw, lr, epochs) in [(32usize, 5e-3, 16usize), (32, 1e-2, 16), (48, 5e-3, 12)] {
        let data: Vec<_> = generate_phantom_dataset(801, 8, (16, hw, hw))
            .unwrap()
            .into_iter()
            .map(|(ct, lv, _)| (ct, lv))
            .collect();
        let ids: Vec<String> = data.iter().map(|(ct, _)| ct.patient_id.clone()).collect();
        let split = split_dataset(&ids, 801).unwrap();
        let window = HuWindow::default();
        let build = |ids: &[String], organ: OrganId| {
            let mut samples = Vec::new();
            for id in ids {
                let (ct, lv) = data.iter().find(|(ct, _)| &ct.patient_id == id).unwrap();
                samples.extend(extract_slices(ct, lv, organ, window).unwrap());
            }
            SliceSet::from_samples(samples)
        };
        for organ in [OrganId::Trachea, OrganId::Esophagus, OrganId::SpinalCord] {
            let train = build(&split.train_ids, organ);
            let val = build(&split.val_ids, organ);
            let test = build(&split.test_ids, organ);
            let cfg = TrainConfig {
                lr0: lr,
                max_epochs: epochs,
                seed: 801,
                ..Default::default()
            };
            let gen_cfg = GeneratorConfig {
                depth: 3,
                base_channels: 8,
                ..Default::default()
            };
            let (graph, params) = build_generator(gen_cfg, 801 + organ.code() as u64).unwrap();
            let t0 = std::time::Instant::now();
            let res = fit(&graph, params, None, &train, &val, &cfg).unwrap();
            let rows = evaluate_model(&graph, &res.best_params, &test, (1.0, 1.0), 8).unwrap();
            let dsc = rows.iter().map(|(_, d, _)| *d).sum::<f64>() / rows.len() as f64;
            println!(
                "{hw}x{hw} lr={lr} {}: test DSC {dsc:.4}, best val DSC {:.4} at epoch {}, {:?}",
                organ.name(),
                res.best_val_dsc,
                res.best_epoch,
                t0.elapsed()
            );
        }
    }
}
