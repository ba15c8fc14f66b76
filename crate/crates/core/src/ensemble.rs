//! Multi-class segmentation by fusing six binary models: pre-activation
//! logit maps are stacked in organ-code order and each pixel takes the
//! argmax organ, or background when even the best logit sits below the
//! 0.5 sigmoid threshold (equivalently, below zero). Exact ties go to the
//! lowest organ code.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Array3};

use crate::error::{OarsegError, Result};
use crate::models::unet::{generator_forward_batch, UNetGraph};
use crate::models::Parameters;
use crate::organs::OrganId;

/// One trained binary model keyed by its organ.
pub type MemberModels = BTreeMap<OrganId, (UNetGraph, Parameters)>;

/// Stacks the six models' logit maps for one slice; channel k holds the
/// logits of organ code k+1.
pub fn stack_logits(models: &MemberModels, image: &Array2<f64>) -> Result<Array3<f64>> {
    let (h, w) = image.dim();
    let mut stack = Array3::<f64>::zeros((6, h, w));
    for organ in OrganId::ALL {
        let (graph, params) = models
            .get(&organ)
            .ok_or(OarsegError::MissingOrganModel(organ.name()))?;
        let logits = generator_forward_batch(graph, params, std::slice::from_ref(image))?.remove(0);
        if logits.dim() != (h, w) {
            return Err(OarsegError::ShapeMismatch(format!(
                "stack_logits: organ {} produced {:?} for {:?} input",
                organ.name(),
                logits.dim(),
                (h, w)
            )));
        }
        stack
            .slice_mut(ndarray::s![organ.code() as usize - 1, .., ..])
            .assign(&logits);
    }
    Ok(stack)
}

/// Per-pixel argmax fusion with the background rule.
pub fn fuse_argmax(stack: &Array3<f64>) -> Result<Array2<u8>> {
    let (c, h, w) = stack.dim();
    if c != 6 {
        return Err(OarsegError::ShapeMismatch(format!(
            "fuse_argmax expects 6 channels, got {c}"
        )));
    }
    if stack.iter().any(|v| !v.is_finite()) {
        return Err(OarsegError::NonFinite("logit stack"));
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best_ch = 0usize;
            let mut best = stack[[0, y, x]];
            for ch in 1..6 {
                let v = stack[[ch, y, x]];
                if v > best {
                    best = v;
                    best_ch = ch;
                }
            }
            // sigmoid(best) >= 0.5 <=> best >= 0
            out[[y, x]] = if best >= 0.0 { best_ch as u8 + 1 } else { 0 };
        }
    }
    Ok(out)
}

/// A trained candidate for ensemble membership. Only `val_dsc` may steer
/// selection; `test_dsc` is carried for bookkeeping and never consulted.
#[derive(Debug, Clone)]
pub struct MemberCandidate {
    pub organ: OrganId,
    pub checkpoint: PathBuf,
    pub val_dsc: f64,
    pub test_dsc: Option<f64>,
}

/// Picks, per organ, the candidate with the highest validation DSC (first
/// wins on exact ties). Errors when an organ has no candidate.
pub fn select_ensemble_members(candidates: &[MemberCandidate]) -> Result<BTreeMap<OrganId, PathBuf>> {
    let mut chosen: BTreeMap<OrganId, (PathBuf, f64)> = BTreeMap::new();
    for cand in candidates {
        match chosen.get(&cand.organ) {
            Some((_, best)) if cand.val_dsc <= *best => {}
            _ => {
                chosen.insert(cand.organ, (cand.checkpoint.clone(), cand.val_dsc));
            }
        }
    }
    for organ in OrganId::ALL {
        if !chosen.contains_key(&organ) {
            return Err(OarsegError::MissingOrganModel(organ.name()));
        }
    }
    Ok(chosen.into_iter().map(|(o, (p, _))| (o, p)).collect())
}

/// Per-organ DSC of an ensemble plus the unweighted mean, Table-2 style.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    /// Indexed by `OrganId::code() - 1`.
    pub per_organ_dsc: [f64; 6],
    pub mean: f64,
}

/// Unweighted mean over the six per-organ scores; the arithmetic behind
/// the ensemble table's final row.
pub fn ensemble_mean(per_organ: &[f64; 6]) -> f64 {
    per_organ.iter().sum::<f64>() / 6.0
}

impl EnsembleReport {
    pub fn from_per_organ(per_organ: [f64; 6]) -> Self {
        EnsembleReport {
            per_organ_dsc: per_organ,
            mean: ensemble_mean(&per_organ),
        }
    }
}

/// One test patient prepared for fusion: normalized slices plus the
/// multi-class ground-truth labels.
#[derive(Debug, Clone)]
pub struct FusionPatient {
    pub patient_id: String,
    pub images: Vec<Array2<f64>>,
    pub labels: Array3<u8>,
}

/// Fuses the member models on every test slice and scores each organ
/// volume-wise against the multi-class ground truth.
pub fn evaluate_ensemble(models: &MemberModels, patients: &[FusionPatient]) -> Result<EnsembleReport> {
    if patients.is_empty() {
        return Err(OarsegError::EmptyInput("evaluate_ensemble needs at least one patient"));
    }
    let mut per_organ = [0.0f64; 6];
    let mut per_patient_dsc: Vec<[f64; 6]> = Vec::with_capacity(patients.len());
    for patient in patients {
        let (h, w) = patient.images[0].dim();
        let n = patient.images.len();
        if patient.labels.dim() != (n, h, w) {
            return Err(OarsegError::ShapeMismatch(format!(
                "fusion patient {}: {n} slices vs labels {:?}",
                patient.patient_id,
                patient.labels.dim()
            )));
        }
        let mut fused = Array3::<u8>::zeros((n, h, w));
        for (k, image) in patient.images.iter().enumerate() {
            let stack = stack_logits(models, image)?;
            let mask = fuse_argmax(&stack)?;
            fused.slice_mut(ndarray::s![k, .., ..]).assign(&mask);
        }
        let mut row = [0.0f64; 6];
        for organ in OrganId::ALL {
            let code = organ.code();
            let pred = fused.mapv(|c| (c == code) as u8);
            let gt = patient.labels.mapv(|c| (c == code) as u8);
            row[code as usize - 1] = crate::metrics::dsc_volume(&pred, &gt)?;
        }
        per_patient_dsc.push(row);
    }
    for row in &per_patient_dsc {
        for (acc, v) in per_organ.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in per_organ.iter_mut() {
        *v /= per_patient_dsc.len() as f64;
    }
    Ok(EnsembleReport::from_per_organ(per_organ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::unet::{build_generator, GeneratorConfig};
    use ndarray::Array3;
    use proptest::prelude::*;

    fn zero_models() -> MemberModels {
        let cfg = GeneratorConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        };
        OrganId::ALL
            .into_iter()
            .map(|o| {
                let (g, mut p) = build_generator(cfg, o.code() as u64).unwrap();
                for (_, v) in p.iter_mut() {
                    v.fill(0.0);
                }
                (o, (g, p))
            })
            .collect()
    }

    #[test]
    fn zero_models_stack_to_zero() {
        let models = zero_models();
        let img = Array2::from_elem((8, 8), 0.5);
        let stack = stack_logits(&models, &img).unwrap();
        assert_eq!(stack.dim(), (6, 8, 8));
        assert!(stack.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_organ_model_errors() {
        let mut models = zero_models();
        models.remove(&OrganId::Trachea);
        let img = Array2::from_elem((8, 8), 0.5);
        assert!(matches!(
            stack_logits(&models, &img),
            Err(OarsegError::MissingOrganModel("trachea"))
        ));
    }

    #[test]
    fn fuse_rules() {
        // all-negative pixel -> background
        let mut stack = Array3::<f64>::from_elem((6, 1, 3), -1.0);
        // pixel 1: logits (-1, 3, 1, -2, -2, -2) -> code 2
        stack[[1, 0, 1]] = 3.0;
        stack[[2, 0, 1]] = 1.0;
        // pixel 2: exact tie 2.0 at channels 3 and 4 (codes 3 and 4) -> code 3
        stack[[2, 0, 2]] = 2.0;
        stack[[3, 0, 2]] = 2.0;
        let fused = fuse_argmax(&stack).unwrap();
        assert_eq!(fused[[0, 0]], 0);
        assert_eq!(fused[[0, 1]], 2);
        assert_eq!(fused[[0, 2]], 3);

        let mut bad = stack.clone();
        bad[[0, 0, 0]] = f64::NAN;
        assert!(fuse_argmax(&bad).is_err());
    }

    #[test]
    fn member_selection_rules() {
        let cand = |organ: OrganId, path: &str, val: f64, test: Option<f64>| MemberCandidate {
            organ,
            checkpoint: PathBuf::from(path),
            val_dsc: val,
            test_dsc: test,
        };
        let mut candidates: Vec<MemberCandidate> = OrganId::ALL
            .into_iter()
            .map(|o| cand(o, &format!("single/{}", o.name()), 0.8, None))
            .collect();
        let selection = select_ensemble_members(&candidates).unwrap();
        assert_eq!(selection[&OrganId::Heart], PathBuf::from("single/heart"));

        candidates.push(cand(OrganId::Heart, "better", 0.91, None));
        candidates.push(cand(OrganId::Heart, "worse", 0.89, None));
        let selection = select_ensemble_members(&candidates).unwrap();
        assert_eq!(selection[&OrganId::Heart], PathBuf::from("better"));

        // Candidates differing only in test DSC leave selection unchanged.
        let mut with_test = candidates.clone();
        for c in &mut with_test {
            c.test_dsc = Some(0.99);
        }
        let selection2 = select_ensemble_members(&with_test).unwrap();
        assert_eq!(selection, selection2);

        let missing: Vec<MemberCandidate> = candidates
            .iter()
            .filter(|c| c.organ != OrganId::Esophagus)
            .cloned()
            .collect();
        assert!(select_ensemble_members(&missing).is_err());
    }

    #[test]
    fn ensemble_mean_matches_published_arithmetic() {
        let gan = [0.9698, 0.9736, 0.8488, 0.759, 0.9258, 0.8861];
        assert!((ensemble_mean(&gan) - 0.8937).abs() < 5e-4);
        let cnn = [0.9669, 0.971, 0.7822, 0.7183, 0.9325, 0.8942];
        assert!((ensemble_mean(&cnn) - 0.8775).abs() < 5e-4);
    }

    proptest! {
        #[test]
        fn fused_mask_is_a_partition(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let stack = Array3::from_shape_fn((6, 5, 5), |_| rng.random_range(-2.0..2.0));
            let fused = fuse_argmax(&stack).unwrap();
            for &v in fused.iter() {
                prop_assert!(v <= 6);
            }
            // adding a constant to all channels preserves the argmax channel
            let shifted = stack.mapv(|v| v + 0.37);
            let fused2 = fuse_argmax(&shifted).unwrap();
            for (y, x) in itertools_free_pairs(5, 5) {
                let a = fused[[y, x]];
                let b = fused2[[y, x]];
                if a != 0 && b != 0 {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    fn itertools_free_pairs(h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect()
    }
}
