//! Critic input encodings and the composite generator loss.
//!
//! The generator emits one shared pre-activation logit map. The product
//! path encodes it through tanh (mask values in (-1, 1)) and multiplies
//! pixelwise into the slice; both fusion paths encode through sigmoid.
//! Ground-truth masks enter the same encodings untransformed (their {0, 1}
//! values are already valid in either range), so a generator whose encoded
//! output equals the ground truth bitwise presents the critic with
//! identical real and fake inputs.
//!
//! Sign conventions, fixed here once:
//! - the critic's own objective is the absolute gap
//!   `|mean D(fake) - mean D(real)|`, which it ascends;
//! - the generator descends `bce + adv_weight * (mean D(real) - mean D(fake))`,
//!   the signed realization of "BCE minus critic loss";
//! - [`LossBreakdown::adversarial`] stores
//!   `adv_weight * (mean D(fake) - mean D(real))` so that
//!   `total = bce - adversarial` always holds.

use ndarray::{Array2, ArrayD};

use crate::autodiff::{sigmoid, NodeId, Tape};
use crate::error::{OarsegError, Result};
use crate::models::critic::{stack_nchw, stack_two_channel, CriticGraph, CriticInputNodes, DiscriminatorKind};
use crate::models::unet::ParamBinding;
use crate::models::Parameters;

/// Discriminator inputs for one batch item, fake path and real path.
#[derive(Debug, Clone)]
pub enum EncodedPair {
    /// Product layout: one channel, mask times image.
    SingleChannelProduct { fake: Array2<f64>, real: Array2<f64> },
    /// Early-fusion layout: image channel plus mask channel.
    TwoChannel {
        fake: [Array2<f64>; 2],
        real: [Array2<f64>; 2],
    },
    /// Late-fusion layout: the two branches stay separate.
    TwoBranch {
        fake: [Array2<f64>; 2],
        real: [Array2<f64>; 2],
    },
}

fn check_shapes(image: &Array2<f64>, other: &Array2<f64>, what: &str) -> Result<()> {
    if image.dim() != other.dim() {
        return Err(OarsegError::ShapeMismatch(format!(
            "{what}: image {:?} vs {:?}",
            image.dim(),
            other.dim()
        )));
    }
    Ok(())
}

/// tanh-encodes logits and multiplies pixelwise into the slice.
pub fn encode_product(image: &Array2<f64>, logits: &Array2<f64>) -> Result<Array2<f64>> {
    check_shapes(image, logits, "encode_product")?;
    Ok(logits.mapv(f64::tanh) * image)
}

/// Product encoding of a ground-truth mask: the mask itself (values {0, 1})
/// times the slice.
pub fn encode_product_gt(image: &Array2<f64>, gt: &Array2<u8>) -> Result<Array2<f64>> {
    let gtf = gt.mapv(|v| v as f64);
    check_shapes(image, &gtf, "encode_product_gt")?;
    Ok(gtf * image)
}

/// Early fusion: channel 0 is the slice, channel 1 the sigmoid-encoded mask.
pub fn encode_early_fusion(image: &Array2<f64>, logits: &Array2<f64>) -> Result<[Array2<f64>; 2]> {
    check_shapes(image, logits, "encode_early_fusion")?;
    Ok([image.clone(), logits.mapv(sigmoid)])
}

pub fn encode_early_fusion_gt(image: &Array2<f64>, gt: &Array2<u8>) -> Result<[Array2<f64>; 2]> {
    let gtf = gt.mapv(|v| v as f64);
    check_shapes(image, &gtf, "encode_early_fusion_gt")?;
    Ok([image.clone(), gtf])
}

/// Late fusion: branch A carries the slice, branch B the sigmoid-encoded
/// mask; no mixing happens before the critic's internal merge.
pub fn encode_late_fusion(image: &Array2<f64>, logits: &Array2<f64>) -> Result<[Array2<f64>; 2]> {
    encode_early_fusion(image, logits)
}

pub fn encode_late_fusion_gt(image: &Array2<f64>, gt: &Array2<u8>) -> Result<[Array2<f64>; 2]> {
    encode_early_fusion_gt(image, gt)
}

/// Builds both paths of the critic input for one slice.
pub fn encode_pair(
    kind: DiscriminatorKind,
    image: &Array2<f64>,
    logits: &Array2<f64>,
    gt: &Array2<u8>,
) -> Result<EncodedPair> {
    Ok(match kind {
        DiscriminatorKind::Product => EncodedPair::SingleChannelProduct {
            fake: encode_product(image, logits)?,
            real: encode_product_gt(image, gt)?,
        },
        DiscriminatorKind::EarlyFusion => EncodedPair::TwoChannel {
            fake: encode_early_fusion(image, logits)?,
            real: encode_early_fusion_gt(image, gt)?,
        },
        DiscriminatorKind::LateFusion => EncodedPair::TwoBranch {
            fake: encode_late_fusion(image, logits)?,
            real: encode_late_fusion_gt(image, gt)?,
        },
    })
}

/// The critic's own objective: absolute difference of batch-mean scores.
pub fn critic_objective(fake_scores: &[f64], real_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() || real_scores.is_empty() {
        return Err(OarsegError::EmptyInput("critic_objective needs non-empty score batches"));
    }
    if fake_scores.len() != real_scores.len() {
        return Err(OarsegError::ShapeMismatch(format!(
            "critic_objective: {} fake vs {} real scores",
            fake_scores.len(),
            real_scores.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(fake_scores) - mean(real_scores)).abs())
}

/// Mean binary cross entropy between a probability map and a binary mask,
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(prob: &Array2<f64>, gt: &Array2<u8>) -> Result<f64> {
    if prob.dim() != gt.dim() {
        return Err(OarsegError::ShapeMismatch(format!(
            "bce_loss: prob {:?} vs gt {:?}",
            prob.dim(),
            gt.dim()
        )));
    }
    let eps = crate::autodiff::BCE_EPS;
    let mut sum = 0.0;
    for (&p, &y) in prob.iter().zip(gt.iter()) {
        let pc = p.clamp(eps, 1.0 - eps);
        let yf = y as f64;
        sum -= yf * pc.ln() + (1.0 - yf) * (1.0 - pc).ln();
    }
    Ok(sum / prob.len() as f64)
}

/// Components of the composite generator loss for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// `bce - adversarial`; the quantity the generator descends.
    pub total: f64,
    pub bce: f64,
    /// `adv_weight * (mean D(fake) - mean D(real))`, signed.
    pub adversarial: f64,
    /// `|mean D(fake) - mean D(real)|`, the critic's own objective.
    pub d_objective: f64,
}

/// Tape nodes produced by [`composite_loss_on_tape`].
pub struct CompositeNodes {
    pub total: NodeId,
    pub bce: NodeId,
    pub mean_fake: NodeId,
    pub mean_real: NodeId,
}

/// Builds the composite loss on an existing tape. `logits` must be an
/// (N, 1, H, W) node (typically the generator's output); images and
/// ground-truth masks enter as constants.
pub fn composite_loss_on_tape(
    tape: &mut Tape,
    critic: &CriticGraph,
    critic_bind: &ParamBinding,
    logits: NodeId,
    images: &[Array2<f64>],
    gts: &[Array2<u8>],
    adv_weight: f64,
) -> Result<CompositeNodes> {
    if images.is_empty() || images.len() != gts.len() {
        return Err(OarsegError::ShapeMismatch("composite loss batch mismatch".into()));
    }
    let image_batch = stack_nchw(images)?;
    let gt_f: Vec<Array2<f64>> = gts.iter().map(|g| g.mapv(|v| v as f64)).collect();
    let gt_batch = stack_nchw(&gt_f)?;
    let gt_dyn: ArrayD<f64> = gt_batch.clone().into_dyn();

    // BCE path: sigmoid of the shared logit map against the mask.
    let prob = tape.sigmoid(logits);
    let bce = tape.bce_mean(prob, gt_dyn);

    // Adversarial path: encode fake (differentiable) and real (constant).
    let image_node = tape.leaf4(image_batch.clone());
    let (fake_input, real_input) = match critic.config.kind {
        DiscriminatorKind::Product => {
            let mask = tape.tanh(logits);
            let fake = tape.mul(mask, image_node);
            let real_plain: Vec<Array2<f64>> = images
                .iter()
                .zip(gts)
                .map(|(im, gt)| encode_product_gt(im, gt))
                .collect::<Result<_>>()?;
            let real = tape.leaf4(stack_nchw(&real_plain)?);
            (CriticInputNodes::Single(fake), CriticInputNodes::Single(real))
        }
        DiscriminatorKind::EarlyFusion => {
            let mask = tape.sigmoid(logits);
            let fake = tape.concat_channels(image_node, mask);
            let real_pairs: Vec<[Array2<f64>; 2]> = images
                .iter()
                .zip(gts)
                .map(|(im, gt)| encode_early_fusion_gt(im, gt))
                .collect::<Result<_>>()?;
            let real_imgs: Vec<Array2<f64>> = real_pairs.iter().map(|p| p[0].clone()).collect();
            let real_masks: Vec<Array2<f64>> = real_pairs.iter().map(|p| p[1].clone()).collect();
            let real = tape.leaf4(stack_two_channel(&real_imgs, &real_masks)?);
            (CriticInputNodes::Single(fake), CriticInputNodes::Single(real))
        }
        DiscriminatorKind::LateFusion => {
            let mask = tape.sigmoid(logits);
            let real_mask_plain: Vec<Array2<f64>> = gts.iter().map(|g| g.mapv(|v| v as f64)).collect();
            let real_mask = tape.leaf4(stack_nchw(&real_mask_plain)?);
            let real_image = tape.leaf4(image_batch);
            (
                CriticInputNodes::Pair { image: image_node, mask },
                CriticInputNodes::Pair { image: real_image, mask: real_mask },
            )
        }
    };

    let fake_scores = critic.forward(tape, critic_bind, fake_input);
    let real_scores = critic.forward(tape, critic_bind, real_input);
    let mean_fake = tape.mean_all(fake_scores);
    let mean_real = tape.mean_all(real_scores);

    // total = bce + w * (mean_real - mean_fake)
    let gap = tape.sub(mean_real, mean_fake);
    let weighted = tape.scale(gap, adv_weight);
    let total = tape.add(bce, weighted);
    Ok(CompositeNodes { total, bce, mean_fake, mean_real })
}

/// Evaluates the composite loss of a logit batch against a frozen critic.
pub fn composite_generator_loss(
    images: &[Array2<f64>],
    logits: &[Array2<f64>],
    gts: &[Array2<u8>],
    critic: &CriticGraph,
    critic_params: &Parameters,
    adv_weight: f64,
) -> Result<LossBreakdown> {
    if images.len() != logits.len() || images.len() != gts.len() || images.is_empty() {
        return Err(OarsegError::ShapeMismatch("composite loss batch mismatch".into()));
    }
    if !critic_params.all_finite() {
        return Err(OarsegError::NonFinite("critic parameters"));
    }
    let mut tape = Tape::new();
    let bind = ParamBinding::bind(&mut tape, critic_params);
    let logit_node = tape.leaf4(stack_nchw(logits)?);
    let nodes = composite_loss_on_tape(&mut tape, critic, &bind, logit_node, images, gts, adv_weight)?;
    Ok(breakdown_from(&tape, &nodes, adv_weight))
}

/// Reads a [`LossBreakdown`] off evaluated composite-loss nodes.
pub fn breakdown_from(tape: &Tape, nodes: &CompositeNodes, adv_weight: f64) -> LossBreakdown {
    let bce = tape.scalar(nodes.bce);
    let mean_fake = tape.scalar(nodes.mean_fake);
    let mean_real = tape.scalar(nodes.mean_real);
    LossBreakdown {
        total: tape.scalar(nodes.total),
        bce,
        adversarial: adv_weight * (mean_fake - mean_real),
        d_objective: (mean_fake - mean_real).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::critic::{build_discriminator, DiscriminatorConfig};
    use ndarray::arr2;
    use proptest::prelude::*;

    fn image() -> Array2<f64> {
        Array2::from_shape_fn((16, 16), |(y, x)| ((y * 16 + x) as f64) / 256.0)
    }

    fn gt_square() -> Array2<u8> {
        let mut g = Array2::<u8>::zeros((16, 16));
        for y in 4..10 {
            for x in 5..12 {
                g[[y, x]] = 1;
            }
        }
        g
    }

    #[test]
    fn product_encoding_values() {
        let img = image();
        let zeros = Array2::<f64>::zeros((16, 16));
        let out = encode_product(&img, &zeros).unwrap();
        assert!(out.iter().all(|&v| v == 0.0), "tanh(0) = 0 zeroes the product");

        // 0.5 * tanh(1) = 0.380797...
        let mut img2 = Array2::<f64>::zeros((16, 16));
        img2[[0, 0]] = 0.5;
        let mut logits = Array2::<f64>::zeros((16, 16));
        logits[[0, 0]] = 1.0;
        let out = encode_product(&img2, &logits).unwrap();
        assert!((out[[0, 0]] - 0.5 * 1.0f64.tanh()).abs() < 1e-12);
        assert!((out[[0, 0]] - 0.380797).abs() < 1e-6);

        // Large logits approach +/- image.
        let big = Array2::<f64>::from_elem((16, 16), 40.0);
        let out_pos = encode_product(&img, &big).unwrap();
        let out_neg = encode_product(&img, &big.mapv(|v| -v)).unwrap();
        for ((a, b), v) in out_pos.iter().zip(out_neg.iter()).zip(img.iter()) {
            assert!((a - v).abs() < 1e-12);
            assert!((b + v).abs() < 1e-12);
        }
    }

    #[test]
    fn early_fusion_encoding_values() {
        let img = image();
        let zeros = Array2::<f64>::zeros((16, 16));
        let [c0, c1] = encode_early_fusion(&img, &zeros).unwrap();
        assert_eq!(c0, img);
        assert!(c1.iter().all(|&v| v == 0.5));

        let mut logits = zeros.clone();
        logits[[0, 0]] = 2.0;
        let [_, c1] = encode_early_fusion(&img, &logits).unwrap();
        assert!((c1[[0, 0]] - 0.880797).abs() < 1e-6);

        let [_, gt_ch] = encode_early_fusion_gt(&img, &gt_square()).unwrap();
        assert!(gt_ch.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn late_fusion_branches_are_independent() {
        let img = image();
        let logits = Array2::<f64>::from_elem((16, 16), 0.7);
        let [_, b1] = encode_late_fusion(&img, &logits).unwrap();
        let perturbed = img.mapv(|v| v + 0.1);
        let [_, b2] = encode_late_fusion(&perturbed, &logits).unwrap();
        assert_eq!(b1, b2, "mask branch must not depend on the image");
        let [gt_a, gt_b] = encode_late_fusion_gt(&img, &gt_square()).unwrap();
        assert_eq!(gt_a, img);
        assert!(gt_b.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn encoding_shape_mismatch_errors() {
        let img = image();
        let small = Array2::<f64>::zeros((8, 8));
        assert!(encode_product(&img, &small).is_err());
        assert!(encode_early_fusion(&img, &small).is_err());
    }

    #[test]
    fn critic_objective_arithmetic() {
        assert_eq!(critic_objective(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.0);
        assert!((critic_objective(&[0.2, 0.2], &[0.7, 0.7]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(critic_objective(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(critic_objective(&[], &[]).is_err());
        assert!(critic_objective(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bce_values() {
        let half = Array2::from_elem((4, 4), 0.5);
        let gt = gt_4x4();
        assert!((bce_loss(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let p9 = Array2::from_elem((4, 4), 0.9);
        let ones = Array2::<u8>::ones((4, 4));
        assert!((bce_loss(&p9, &ones).unwrap() + 0.9f64.ln()).abs() < 1e-12);
        assert!((bce_loss(&p9, &ones).unwrap() - 0.105361).abs() < 1e-6);

        // Perfect prediction after clamping: loss ~ eps.
        let exact = gt.mapv(|v| v as f64);
        let loss = bce_loss(&exact, &gt).unwrap();
        assert!(loss < 1e-6 && loss >= 0.0);
    }

    fn gt_4x4() -> Array2<u8> {
        arr2(&[[0, 1, 0, 1], [1, 0, 1, 0], [0, 0, 1, 1], [1, 1, 0, 0]])
    }

    #[test]
    fn perfect_generator_zeroes_adversarial_term_for_all_kinds() {
        let img = image();
        let gt = gt_square();
        // Simulate a generator whose encoded output equals GT bitwise by
        // feeding the same encoded arrays through the critic on both paths.
        for kind in DiscriminatorKind::ALL {
            let (critic, cp) = build_discriminator(DiscriminatorConfig::test_scale(kind), 3);
            let (fake, real) = match kind {
                DiscriminatorKind::Product => {
                    let enc = encode_product_gt(&img, &gt).unwrap();
                    let b = stack_nchw(&[enc]).unwrap();
                    (
                        critic.score_batch(&cp, &b, None).unwrap(),
                        critic.score_batch(&cp, &b, None).unwrap(),
                    )
                }
                DiscriminatorKind::EarlyFusion => {
                    let [a, m] = encode_early_fusion_gt(&img, &gt).unwrap();
                    let b = stack_two_channel(&[a], &[m]).unwrap();
                    (
                        critic.score_batch(&cp, &b, None).unwrap(),
                        critic.score_batch(&cp, &b, None).unwrap(),
                    )
                }
                DiscriminatorKind::LateFusion => {
                    let [a, m] = encode_late_fusion_gt(&img, &gt).unwrap();
                    let ab = stack_nchw(&[a]).unwrap();
                    let mb = stack_nchw(&[m]).unwrap();
                    (
                        critic.score_batch(&cp, &ab, Some(&mb)).unwrap(),
                        critic.score_batch(&cp, &ab, Some(&mb)).unwrap(),
                    )
                }
            };
            let gap = critic_objective(fake.as_slice().unwrap(), real.as_slice().unwrap()).unwrap();
            assert_eq!(gap, 0.0, "kind {}", kind.name());
        }
    }

    #[test]
    fn constant_critic_makes_total_equal_bce() {
        // A critic with all-zero parameters outputs exactly 0 for any input.
        let (critic, mut cp) = build_discriminator(
            DiscriminatorConfig::test_scale(DiscriminatorKind::EarlyFusion),
            0,
        );
        for (_, v) in cp.iter_mut() {
            v.fill(0.0);
        }
        let img = image();
        let gt = gt_square();
        let logits = Array2::from_elem((16, 16), 0.3);
        let b = composite_generator_loss(&[img], &[logits], &[gt], &critic, &cp, 1.0).unwrap();
        assert_eq!(b.adversarial, 0.0);
        assert_eq!(b.d_objective, 0.0);
        assert!((b.total - b.bce).abs() < 1e-15);
        assert!(b.bce > 0.0);
    }

    proptest! {
        #[test]
        fn critic_objective_is_symmetric_and_nonnegative(
            fake in proptest::collection::vec(-10.0f64..10.0, 1..20),
            delta in proptest::collection::vec(-10.0f64..10.0, 1..20),
        ) {
            let n = fake.len().min(delta.len());
            let fake = &fake[..n];
            let real: Vec<f64> = delta[..n].to_vec();
            let a = critic_objective(fake, &real).unwrap();
            let b = critic_objective(&real, fake).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn product_encoding_is_odd_in_logits(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0));
            let logits = Array2::from_shape_fn((8, 8), |_| rng.random_range(-3.0..3.0));
            let pos = encode_product(&img, &logits).unwrap();
            let neg = encode_product(&img, &logits.mapv(|v| -v)).unwrap();
            for (a, b) in pos.iter().zip(neg.iter()) {
                prop_assert!((a + b).abs() < 1e-12);
            }
        }
    }
}
