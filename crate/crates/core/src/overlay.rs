//! Prediction-vs-ground-truth overlays: yellow where they agree, green for
//! false positives, red for false negatives, blended over the grayscale
//! slice.

use std::path::Path;

use image::{Rgba, RgbaImage};
use ndarray::Array2;

use crate::error::{OarsegError, Result};

/// Per-pixel disagreement class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlayClass {
    /// Background on both masks.
    None,
    /// pred ∧ gt
    Overlap,
    /// pred ∧ ¬gt
    FalsePositive,
    /// ¬pred ∧ gt
    FalseNegative,
}

#[derive(Debug, Clone, Copy)]
pub struct OverlaySpec {
    pub overlap_color: [u8; 3],
    pub false_positive_color: [u8; 3],
    pub false_negative_color: [u8; 3],
    pub opacity: f64,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec {
            overlap_color: [255, 255, 0],
            false_positive_color: [0, 255, 0],
            false_negative_color: [255, 0, 0],
            opacity: 0.5,
        }
    }
}

impl OverlaySpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.opacity && self.opacity <= 1.0) {
            return Err(OarsegError::InvalidConfig("overlay opacity must lie in (0, 1]".into()));
        }
        let colors = [
            self.overlap_color,
            self.false_positive_color,
            self.false_negative_color,
        ];
        for i in 0..3 {
            for j in i + 1..3 {
                if colors[i] == colors[j] {
                    return Err(OarsegError::InvalidConfig(
                        "overlay colors must be pairwise distinct".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Classifies every pixel of a prediction/ground-truth pair.
pub fn classify_pixels(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Array2<OverlayClass>> {
    if pred.dim() != gt.dim() {
        return Err(OarsegError::ShapeMismatch(format!(
            "classify_pixels: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut out = Array2::from_elem(pred.dim(), OverlayClass::None);
    for ((o, &p), &g) in out.iter_mut().zip(pred.iter()).zip(gt.iter()) {
        *o = match (p != 0, g != 0) {
            (true, true) => OverlayClass::Overlap,
            (true, false) => OverlayClass::FalsePositive,
            (false, true) => OverlayClass::FalseNegative,
            (false, false) => OverlayClass::None,
        };
    }
    Ok(out)
}

/// Renders the overlay into an RGBA image; the slice (values in [0, 1])
/// becomes the grayscale base and the three classes blend on top.
pub fn render_overlay(
    image01: &Array2<f64>,
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    spec: &OverlaySpec,
) -> Result<RgbaImage> {
    spec.validate()?;
    if image01.dim() != pred.dim() {
        return Err(OarsegError::ShapeMismatch(format!(
            "render_overlay: image {:?} vs pred {:?}",
            image01.dim(),
            pred.dim()
        )));
    }
    let classes = classify_pixels(pred, gt)?;
    let (h, w) = image01.dim();
    let mut img = RgbaImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let gray = (image01[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            let base = [gray, gray, gray];
            let color = match classes[[y, x]] {
                OverlayClass::None => None,
                OverlayClass::Overlap => Some(spec.overlap_color),
                OverlayClass::FalsePositive => Some(spec.false_positive_color),
                OverlayClass::FalseNegative => Some(spec.false_negative_color),
            };
            let px = match color {
                None => base,
                Some(c) => {
                    let blend = |b: u8, o: u8| {
                        ((1.0 - spec.opacity) * b as f64 + spec.opacity * o as f64).round() as u8
                    };
                    [blend(base[0], c[0]), blend(base[1], c[1]), blend(base[2], c[2])]
                }
            };
            img.put_pixel(x as u32, y as u32, Rgba([px[0], px[1], px[2], 255]));
        }
    }
    Ok(img)
}

pub fn save_overlay_png(
    path: &Path,
    image01: &Array2<f64>,
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    spec: &OverlaySpec,
) -> Result<()> {
    let img = render_overlay(image01, pred, gt, spec)?;
    img.save(path).map_err(|e| OarsegError::InvalidConfig(format!("png write failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn identical_masks_are_all_overlap() {
        let mut m = Array2::<u8>::zeros((6, 6));
        for y in 1..4 {
            for x in 2..5 {
                m[[y, x]] = 1;
            }
        }
        let classes = classify_pixels(&m, &m).unwrap();
        for (&c, &v) in classes.iter().zip(m.iter()) {
            if v != 0 {
                assert_eq!(c, OverlayClass::Overlap);
            } else {
                assert_eq!(c, OverlayClass::None);
            }
        }
    }

    #[test]
    fn empty_pred_is_all_false_negative() {
        let empty = Array2::<u8>::zeros((4, 4));
        let mut gt = Array2::<u8>::zeros((4, 4));
        gt[[1, 1]] = 1;
        gt[[2, 3]] = 1;
        let classes = classify_pixels(&empty, &gt).unwrap();
        let fn_count = classes.iter().filter(|&&c| c == OverlayClass::FalseNegative).count();
        let other = classes
            .iter()
            .filter(|&&c| c == OverlayClass::FalsePositive || c == OverlayClass::Overlap)
            .count();
        assert_eq!(fn_count, 2);
        assert_eq!(other, 0);
    }

    #[test]
    fn checkerboard_vs_inverse_has_equal_green_and_red() {
        let pred = Array2::from_shape_fn((8, 8), |(y, x)| ((y + x) % 2) as u8);
        let gt = Array2::from_shape_fn((8, 8), |(y, x)| ((y + x + 1) % 2) as u8);
        let classes = classify_pixels(&pred, &gt).unwrap();
        let fp = classes.iter().filter(|&&c| c == OverlayClass::FalsePositive).count();
        let fneg = classes.iter().filter(|&&c| c == OverlayClass::FalseNegative).count();
        assert_eq!(fp, 32);
        assert_eq!(fneg, 32);
        assert_eq!(fp + fneg, 64);
    }

    #[test]
    fn spec_validation() {
        assert!(OverlaySpec::default().validate().is_ok());
        let bad = OverlaySpec {
            opacity: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let dup = OverlaySpec {
            false_positive_color: [255, 255, 0],
            ..Default::default()
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn rendered_pixels_blend_classes() {
        let image = Array2::from_elem((2, 2), 0.0);
        let mut pred = Array2::<u8>::zeros((2, 2));
        let mut gt = Array2::<u8>::zeros((2, 2));
        pred[[0, 0]] = 1;
        gt[[0, 0]] = 1; // overlap
        pred[[0, 1]] = 1; // fp
        gt[[1, 0]] = 1; // fn
        let img = render_overlay(&image, &pred, &gt, &OverlaySpec { opacity: 1.0, ..Default::default() }).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 0, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 255, 0, 255]);
        assert_eq!(img.get_pixel(0, 1).0, [255, 0, 0, 255]);
        assert_eq!(img.get_pixel(1, 1).0, [0, 0, 0, 255]);
    }

    proptest! {
        #[test]
        fn classes_partition_foreground(seed in 0u64..300) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pred = Array2::from_shape_fn((10, 10), |_| rng.random_range(0..2u8));
            let gt = Array2::from_shape_fn((10, 10), |_| rng.random_range(0..2u8));
            let classes = classify_pixels(&pred, &gt).unwrap();
            for ((&c, &p), &g) in classes.iter().zip(pred.iter()).zip(gt.iter()) {
                let in_union = p != 0 || g != 0;
                prop_assert_eq!(c != OverlayClass::None, in_union);
            }
        }
    }
}
