//! Volume-wise Dice and slice-wise HD95 (averaged per patient), with
//! pinned degenerate-case policies:
//!
//! - DSC of two empty masks is 1.0;
//! - HD95 of a slice where both masks are empty is undefined and excluded
//!   from the patient mean;
//! - HD95 of a slice where exactly one mask is empty is undefined and
//!   counted separately as a one-sided-empty slice;
//! - boundary pixels use 4-connectivity; percentiles interpolate linearly
//!   between order statistics.

use ndarray::{Array2, Array3};

use crate::error::{OarsegError, Result};

/// Stacked per-slice binary masks for one patient and one organ.
#[derive(Debug, Clone)]
pub struct BinaryMaskVolume {
    pub patient_id: String,
    pub masks: Array3<u8>,
}

impl BinaryMaskVolume {
    pub fn new(patient_id: impl Into<String>, masks: Array3<u8>) -> Result<Self> {
        if masks.iter().any(|&v| v > 1) {
            return Err(OarsegError::InvalidVolume("binary mask contains values outside {0,1}".into()));
        }
        Ok(BinaryMaskVolume {
            patient_id: patient_id.into(),
            masks,
        })
    }
}

/// Dice similarity over the entire volume; both-empty pairs score 1.0.
pub fn dsc_volume(pred: &Array3<u8>, gt: &Array3<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(OarsegError::ShapeMismatch(format!(
            "dsc_volume: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let a = (a != 0) as u64;
        let b = (b != 0) as u64;
        inter += a & b;
        p += a;
        g += b;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Slice-level Dice with the same conventions as [`dsc_volume`].
pub fn dsc_slice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    let pv = pred.to_shape((1, pred.dim().0, pred.dim().1)).unwrap().to_owned();
    let gv = gt.to_shape((1, gt.dim().0, gt.dim().1)).unwrap().to_owned();
    dsc_volume(&pv, &gv)
}

/// Foreground pixels with at least one 4-neighbor equal to 0, or lying on
/// the array border.
pub fn surface_pixels(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let has_bg_neighbor = (y > 0 && mask[[y - 1, x]] == 0)
                || (y + 1 < h && mask[[y + 1, x]] == 0)
                || (x > 0 && mask[[y, x - 1]] == 0)
                || (x + 1 < w && mask[[y, x + 1]] == 0);
            if on_border || has_bg_neighbor {
                out.push((y, x));
            }
        }
    }
    out
}

/// `q`-th percentile (0..=100) by linear interpolation between order
/// statistics of an ascending-sorted slice.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty list");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Outcome of a per-slice HD95 computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SliceHd {
    Defined(f64),
    /// Both masks empty: no basis for a distance; excluded from means.
    BothEmpty,
    /// Exactly one mask empty: undefined, counted as a penalty slice.
    OneEmpty,
}

/// 95th percentile of pooled bidirectional boundary distances between two
/// slice masks, in physical units given in-plane `spacing` (dy, dx).
pub fn hd95_slice(pred: &Array2<u8>, gt: &Array2<u8>, spacing: (f64, f64)) -> Result<SliceHd> {
    if pred.dim() != gt.dim() {
        return Err(OarsegError::ShapeMismatch(format!(
            "hd95_slice: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let a = surface_pixels(pred);
    let b = surface_pixels(gt);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(SliceHd::BothEmpty),
        (true, false) | (false, true) => return Ok(SliceHd::OneEmpty),
        _ => {}
    }
    let (dy, dx) = spacing;
    let sq_dist = |p: (usize, usize), q: (usize, usize)| {
        let ddy = (p.0 as f64 - q.0 as f64) * dy;
        let ddx = (p.1 as f64 - q.1 as f64) * dx;
        ddy * ddy + ddx * ddx
    };
    let mut pool = Vec::with_capacity(a.len() + b.len());
    for &p in &a {
        let d2 = b.iter().map(|&q| sq_dist(p, q)).fold(f64::INFINITY, f64::min);
        pool.push(d2.sqrt());
    }
    for &q in &b {
        let d2 = a.iter().map(|&p| sq_dist(p, q)).fold(f64::INFINITY, f64::min);
        pool.push(d2.sqrt());
    }
    pool.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(SliceHd::Defined(percentile_linear(&pool, 95.0)))
}

/// Per-patient HD95: mean of the defined per-slice values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientHd {
    /// `None` when no slice had a defined HD95.
    pub mean: Option<f64>,
    pub n_defined: usize,
    pub n_one_sided_empty: usize,
}

pub fn hd95_patient(pred: &Array3<u8>, gt: &Array3<u8>, spacing: (f64, f64)) -> Result<PatientHd> {
    if pred.dim() != gt.dim() {
        return Err(OarsegError::ShapeMismatch(format!(
            "hd95_patient: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let n_slices = pred.dim().0;
    let mut sum = 0.0;
    let mut n_defined = 0usize;
    let mut n_one_sided = 0usize;
    for k in 0..n_slices {
        let p = pred.slice(ndarray::s![k, .., ..]).to_owned();
        let g = gt.slice(ndarray::s![k, .., ..]).to_owned();
        match hd95_slice(&p, &g, spacing)? {
            SliceHd::Defined(v) => {
                sum += v;
                n_defined += 1;
            }
            SliceHd::OneEmpty => n_one_sided += 1,
            SliceHd::BothEmpty => {}
        }
    }
    Ok(PatientHd {
        mean: (n_defined > 0).then(|| sum / n_defined as f64),
        n_defined,
        n_one_sided_empty: n_one_sided,
    })
}

/// One row of a Table-1-style report: per-patient metrics aggregated as
/// mean with (min, max) range.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub target: String,
    pub model: String,
    pub dsc_mean: f64,
    pub dsc_min: f64,
    pub dsc_max: f64,
    pub hd95_mean: f64,
    pub hd95_min: f64,
    pub hd95_max: f64,
    pub n_patients: usize,
    pub n_undefined_slices: usize,
}

/// Aggregates per-patient (dsc, hd95) values into a [`MetricRow`].
///
/// Patients whose HD95 is undefined are excluded from the HD95 aggregate
/// but still counted in `n_patients`; their one-sided-empty slices feed
/// `n_undefined_slices`.
pub fn aggregate_patients(
    target: &str,
    model: &str,
    per_patient: &[(f64, PatientHd)],
) -> Result<MetricRow> {
    if per_patient.is_empty() {
        return Err(OarsegError::EmptyInput("aggregate_patients needs at least one patient"));
    }
    let dscs: Vec<f64> = per_patient.iter().map(|(d, _)| *d).collect();
    let hds: Vec<f64> = per_patient.iter().filter_map(|(_, h)| h.mean).collect();
    let n_undefined: usize = per_patient.iter().map(|(_, h)| h.n_one_sided_empty).sum();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (hd_mean, hd_min, hd_max) = if hds.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        (mean(&hds), min(&hds), max(&hds))
    };
    Ok(MetricRow {
        target: target.to_string(),
        model: model.to_string(),
        dsc_mean: mean(&dscs),
        dsc_min: min(&dscs),
        dsc_max: max(&dscs),
        hd95_mean: hd_mean,
        hd95_min: hd_min,
        hd95_max: hd_max,
        n_patients: per_patient.len(),
        n_undefined_slices: n_undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn vol(data: Array2<u8>) -> Array3<u8> {
        let (h, w) = data.dim();
        data.to_shape((1, h, w)).unwrap().to_owned()
    }

    #[test]
    fn dsc_trivials() {
        let mut a = Array3::<u8>::zeros((2, 4, 4));
        a[[0, 1, 1]] = 1;
        a[[1, 2, 2]] = 1;
        assert_eq!(dsc_volume(&a, &a).unwrap(), 1.0);

        let mut b = Array3::<u8>::zeros((2, 4, 4));
        b[[0, 3, 3]] = 1;
        assert_eq!(dsc_volume(&a, &b).unwrap(), 0.0);

        let empty = Array3::<u8>::zeros((2, 4, 4));
        assert_eq!(dsc_volume(&empty, &empty).unwrap(), 1.0);

        let c = Array3::<u8>::zeros((2, 4, 5));
        assert!(dsc_volume(&a, &c).is_err());
    }

    #[test]
    fn dsc_shifted_square_is_half() {
        // 4x4 square vs the same square shifted by 2 columns: overlap 8.
        let mut p = Array2::<u8>::zeros((8, 8));
        let mut g = Array2::<u8>::zeros((8, 8));
        for y in 2..6 {
            for x in 0..4 {
                p[[y, x]] = 1;
            }
            for x in 2..6 {
                g[[y, x]] = 1;
            }
        }
        assert_eq!(dsc_volume(&vol(p), &vol(g)).unwrap(), 0.5);
    }

    #[test]
    fn surface_of_single_pixel_and_square() {
        let mut m = Array2::<u8>::zeros((6, 6));
        m[[3, 3]] = 1;
        assert_eq!(surface_pixels(&m), vec![(3, 3)]);

        let mut sq = Array2::<u8>::zeros((6, 6));
        for y in 1..5 {
            for x in 1..5 {
                sq[[y, x]] = 1;
            }
        }
        let surf = surface_pixels(&sq);
        assert_eq!(surf.len(), 12);
        assert!(!surf.contains(&(2, 2)) && !surf.contains(&(3, 3)));

        assert!(surface_pixels(&Array2::<u8>::zeros((4, 4))).is_empty());
    }

    #[test]
    fn hd95_trivials_and_pythagoras() {
        let mut m = Array2::<u8>::zeros((8, 8));
        m[[2, 2]] = 1;
        m[[5, 5]] = 1;
        assert_eq!(hd95_slice(&m, &m, (1.0, 1.0)).unwrap(), SliceHd::Defined(0.0));

        let mut p = Array2::<u8>::zeros((8, 8));
        let mut g = Array2::<u8>::zeros((8, 8));
        p[[0, 0]] = 1;
        g[[3, 4]] = 1;
        // Pool is {5, 5}; every percentile is 5.
        assert_eq!(hd95_slice(&p, &g, (1.0, 1.0)).unwrap(), SliceHd::Defined(5.0));

        let empty = Array2::<u8>::zeros((8, 8));
        assert_eq!(hd95_slice(&empty, &empty, (1.0, 1.0)).unwrap(), SliceHd::BothEmpty);
        assert_eq!(hd95_slice(&p, &empty, (1.0, 1.0)).unwrap(), SliceHd::OneEmpty);
    }

    #[test]
    fn hd95_respects_spacing() {
        let mut p = Array2::<u8>::zeros((4, 4));
        let mut g = Array2::<u8>::zeros((4, 4));
        p[[0, 0]] = 1;
        g[[0, 1]] = 1; // one pixel apart in x
        assert_eq!(
            hd95_slice(&p, &g, (1.0, 2.5)).unwrap(),
            SliceHd::Defined(2.5)
        );
    }

    #[test]
    fn patient_mean_skips_undefined() {
        // Slice 0: identical single pixels -> 0.0 is defined but use
        // distinct masks to get {1.0} and {2.0} means instead.
        let mut pred = Array3::<u8>::zeros((3, 8, 8));
        let mut gt = Array3::<u8>::zeros((3, 8, 8));
        // slice 0: distance 1 everywhere -> HD95 = 1.0
        pred[[0, 2, 2]] = 1;
        gt[[0, 2, 3]] = 1;
        // slice 1: distance 2 -> HD95 = 2.0
        pred[[1, 2, 2]] = 1;
        gt[[1, 2, 4]] = 1;
        // slice 2: one-sided empty -> undefined
        pred[[2, 1, 1]] = 1;
        let r = hd95_patient(&pred, &gt, (1.0, 1.0)).unwrap();
        assert_eq!(r.mean, Some(1.5));
        assert_eq!(r.n_defined, 2);
        assert_eq!(r.n_one_sided_empty, 1);

        let all_empty = Array3::<u8>::zeros((2, 4, 4));
        let r = hd95_patient(&all_empty, &all_empty, (1.0, 1.0)).unwrap();
        assert_eq!(r.mean, None);
    }

    #[test]
    fn dilated_square_hd95_is_one() {
        // 4-neighborhood dilation of a square moves every boundary point by
        // exactly one pixel.
        let (h, w) = (16, 16);
        let mut gt = Array3::<u8>::zeros((4, h, w));
        let mut pred = Array3::<u8>::zeros((4, h, w));
        for k in 0..4 {
            for y in 5..11 {
                for x in 5..11 {
                    gt[[k, y, x]] = 1;
                }
            }
            // dilate by one in 4-neighborhood
            for y in 0..h {
                for x in 0..w {
                    if gt[[k, y, x]] == 1 {
                        pred[[k, y, x]] = 1;
                        if y > 0 {
                            pred[[k, y - 1, x]] = 1;
                        }
                        if y + 1 < h {
                            pred[[k, y + 1, x]] = 1;
                        }
                        if x > 0 {
                            pred[[k, y, x - 1]] = 1;
                        }
                        if x + 1 < w {
                            pred[[k, y, x + 1]] = 1;
                        }
                    }
                }
            }
        }
        let r = hd95_patient(&pred, &gt, (1.0, 1.0)).unwrap();
        assert_eq!(r.mean, Some(1.0));
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_linear(&v, 0.0), 1.0);
        assert_eq!(percentile_linear(&v, 100.0), 4.0);
        assert_eq!(percentile_linear(&v, 50.0), 2.5);
        assert!((percentile_linear(&v, 95.0) - 3.85).abs() < 1e-12);
        assert_eq!(percentile_linear(&[7.0], 95.0), 7.0);
    }

    proptest! {
        #[test]
        fn dsc_is_symmetric_and_bounded(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = Array3::<u8>::zeros((2, 8, 8));
            let mut b = Array3::<u8>::zeros((2, 8, 8));
            for v in a.iter_mut() { *v = rng.random_range(0..2); }
            for v in b.iter_mut() { *v = rng.random_range(0..2); }
            let d1 = dsc_volume(&a, &b).unwrap();
            let d2 = dsc_volume(&b, &a).unwrap();
            prop_assert_eq!(d1, d2);
            prop_assert!((0.0..=1.0).contains(&d1));
        }

        #[test]
        fn hd95_symmetric_and_translation_invariant(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = Array2::<u8>::zeros((12, 12));
            let mut b = Array2::<u8>::zeros((12, 12));
            // foreground confined to a 6x6 box so a (2,3) shift stays in bounds
            for y in 2..8 { for x in 2..8 {
                a[[y, x]] = rng.random_range(0..2);
                b[[y, x]] = rng.random_range(0..2);
            }}
            let d_ab = hd95_slice(&a, &b, (1.0, 1.0)).unwrap();
            let d_ba = hd95_slice(&b, &a, (1.0, 1.0)).unwrap();
            prop_assert_eq!(d_ab, d_ba);
            if let SliceHd::Defined(v) = d_ab {
                let shift = |m: &Array2<u8>| {
                    let mut s = Array2::<u8>::zeros((12, 12));
                    for y in 2..8 { for x in 2..8 {
                        s[[y + 2, x + 3]] = m[[y, x]];
                    }}
                    s
                };
                let d_shift = hd95_slice(&shift(&a), &shift(&b), (1.0, 1.0)).unwrap();
                if let SliceHd::Defined(v2) = d_shift {
                    prop_assert!((v - v2).abs() < 1e-12);
                } else {
                    prop_assert!(false, "shifted pair lost definedness");
                }
            }
        }
    }
}
