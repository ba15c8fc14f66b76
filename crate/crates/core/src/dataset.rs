//! Slice extraction, Hounsfield windowing, patient-level splits, and
//! class statistics.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OarsegError, Result};
use crate::organs::OrganId;
use crate::volume::{check_pair, CtVolume, LabelVolume};

/// Hounsfield window mapped affinely onto [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        // Covers lung through bone; the normalized range the models expect.
        HuWindow { lo: -1000.0, hi: 1000.0 }
    }
}

impl HuWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(OarsegError::InvalidWindow { lo, hi });
        }
        Ok(HuWindow { lo, hi })
    }
}

/// One normalized 2-D slice paired with the binary target mask for one organ.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
    pub patient_id: String,
    pub slice_index: usize,
}

/// Patient-disjoint train/val/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Clips a HU slice into `window` and rescales to [0, 1].
pub fn normalize_slice(hu: &Array2<f64>, window: HuWindow) -> Result<Array2<f64>> {
    let HuWindow { lo, hi } = window;
    if !(lo < hi) {
        return Err(OarsegError::InvalidWindow { lo, hi });
    }
    let span = hi - lo;
    Ok(hu.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

/// Splits patient ids 80/10/10 by patient count, deterministically in `seed`.
///
/// Validation and test each get `max(1, round(n/10))` patients so small
/// datasets still produce usable splits.
pub fn split_dataset(patient_ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = patient_ids.len();
    if n < 3 {
        return Err(OarsegError::TooFewPatients { need: 3, got: n });
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = n_val.min(n - n_val - 1).max(1);
    let n_train = n - n_val - n_test;

    let train_ids = ids[..n_train].to_vec();
    let val_ids = ids[n_train..n_train + n_val].to_vec();
    let test_ids = ids[n_train + n_val..].to_vec();
    Ok(DatasetSplit { train_ids, val_ids, test_ids })
}

/// Extracts one [`SliceSample`] per axial slice: windowed image plus the
/// binary indicator of `organ` on that slice.
pub fn extract_slices(
    volume: &CtVolume,
    labels: &LabelVolume,
    organ: OrganId,
    window: HuWindow,
) -> Result<Vec<SliceSample>> {
    check_pair(volume, labels)?;
    let (n_slices, h, w) = volume.shape();
    let code = organ.code();
    let mut out = Vec::with_capacity(n_slices);
    for k in 0..n_slices {
        let hu = volume
            .voxels
            .slice(ndarray::s![k, .., ..])
            .mapv(|v| v as f64);
        let image = normalize_slice(&hu, window)?;
        let mut mask = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                if labels.labels[[k, y, x]] == code {
                    mask[[y, x]] = 1;
                }
            }
        }
        out.push(SliceSample {
            image,
            mask,
            patient_id: volume.patient_id.clone(),
            slice_index: k,
        });
    }
    Ok(out)
}

/// Voxel fractions per class over a set of label volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub background: f64,
    /// Indexed by `OrganId::code() - 1`.
    pub organs: [f64; 6],
}

impl ClassDistribution {
    pub fn fraction(&self, organ: OrganId) -> f64 {
        self.organs[organ.code() as usize - 1]
    }
}

pub fn class_pixel_distribution(labels: &[LabelVolume]) -> Result<ClassDistribution> {
    if labels.is_empty() {
        return Err(OarsegError::EmptyInput("class_pixel_distribution needs at least one volume"));
    }
    let mut counts = [0u64; 7];
    let mut total = 0u64;
    for vol in labels {
        for &c in vol.labels.iter() {
            counts[c as usize] += 1;
            total += 1;
        }
    }
    let mut organs = [0.0; 6];
    for (i, o) in organs.iter_mut().enumerate() {
        *o = counts[i + 1] as f64 / total as f64;
    }
    Ok(ClassDistribution {
        background: counts[0] as f64 / total as f64,
        organs,
    })
}

/// Rebuilds the per-organ indicator volume from extracted slices; used to
/// check that slicing loses nothing.
pub fn stack_masks(samples: &[SliceSample]) -> Result<Array3<u8>> {
    if samples.is_empty() {
        return Err(OarsegError::EmptyInput("stack_masks needs at least one slice"));
    }
    let (h, w) = samples[0].mask.dim();
    let mut vol = Array3::<u8>::zeros((samples.len(), h, w));
    for (k, s) in samples.iter().enumerate() {
        if s.mask.dim() != (h, w) {
            return Err(OarsegError::ShapeMismatch("inconsistent slice shapes".into()));
        }
        vol.slice_mut(ndarray::s![k, .., ..]).assign(&s.mask);
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn window_endpoints_and_midpoint() {
        let w = HuWindow::new(-1000.0, 1000.0).unwrap();
        let hu = arr2(&[[-1000.0, 1000.0, 0.0, -1500.0, 1500.0]]);
        let out = normalize_slice(&hu, w).unwrap();
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 1]], 1.0);
        assert_eq!(out[[0, 2]], 0.5);
        assert_eq!(out[[0, 3]], 0.0);
        assert_eq!(out[[0, 4]], 1.0);
    }

    #[test]
    fn window_rejects_bad_order() {
        assert!(HuWindow::new(10.0, 10.0).is_err());
        assert!(HuWindow::new(10.0, -10.0).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn split_sizes_match_proportions() {
        let s = split_dataset(&ids(50), 0).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (40, 5, 5));
        let s = split_dataset(&ids(10), 0).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (8, 1, 1));
        let s = split_dataset(&ids(3), 0).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len(), s.test_ids.len()), (1, 1, 1));
        assert!(split_dataset(&ids(2), 0).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(&ids(23), 7).unwrap();
        let b = split_dataset(&ids(23), 7).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&ids(23), 8).unwrap();
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn split_partitions_ids(n in 3usize..60, seed in 0u64..1000) {
            let all = ids(n);
            let s = split_dataset(&all, seed).unwrap();
            let mut union: Vec<String> = s.train_ids.iter()
                .chain(&s.val_ids)
                .chain(&s.test_ids)
                .cloned()
                .collect();
            union.sort();
            prop_assert_eq!(union, all);
            for id in &s.val_ids {
                prop_assert!(!s.train_ids.contains(id) && !s.test_ids.contains(id));
            }
            for id in &s.test_ids {
                prop_assert!(!s.train_ids.contains(id));
            }
        }

        #[test]
        fn normalize_is_monotone(a in -2000.0f64..2000.0, b in -2000.0f64..2000.0) {
            let w = HuWindow::default();
            let arr = arr2(&[[a.min(b), a.max(b)]]);
            let out = normalize_slice(&arr, w).unwrap();
            prop_assert!(out[[0, 0]] <= out[[0, 1]]);
        }
    }

    #[test]
    fn distribution_degenerate_and_half() {
        use ndarray::Array3;
        let all_bg = LabelVolume::new("a", Array3::zeros((2, 4, 4))).unwrap();
        let d = class_pixel_distribution(&[all_bg]).unwrap();
        assert_eq!(d.background, 1.0);
        assert_eq!(d.organs, [0.0; 6]);

        let mut half = Array3::<u8>::zeros((2, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                half[[0, y, x]] = 1;
            }
        }
        let d = class_pixel_distribution(&[LabelVolume::new("b", half).unwrap()]).unwrap();
        assert_eq!(d.fraction(OrganId::RightLung), 0.5);
        assert!(class_pixel_distribution(&[]).is_err());
    }

    #[test]
    fn extract_one_sample_per_slice_and_zero_masks() {
        use ndarray::Array3;
        let mut lab = Array3::<u8>::zeros((8, 16, 16));
        lab[[3, 5, 5]] = 3;
        let ct = CtVolume::new("p", Array3::zeros((8, 16, 16)), [1.0; 3]).unwrap();
        let lv = LabelVolume::new("p", lab).unwrap();
        let samples = extract_slices(&ct, &lv, OrganId::Heart, HuWindow::default()).unwrap();
        assert_eq!(samples.len(), 8);
        assert_eq!(samples[3].mask.sum(), 1);
        for (k, s) in samples.iter().enumerate() {
            if k != 3 {
                assert_eq!(s.mask.sum(), 0);
            }
            assert_eq!(s.slice_index, k);
        }
    }
}
