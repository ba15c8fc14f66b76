//! The three discriminator (critic) designs. All reduce their input to one
//! scalar score per batch item: strided convolution blocks with leaky ReLU,
//! global average pooling, and a dense head. No normalization layers, so
//! single-sample inference is exact and deterministic.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{OarsegError, Result};
use crate::models::params::{init_parameters, ParamSpecs, Parameters};
use crate::models::unet::ParamBinding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    /// Single channel: the slice multiplied pixelwise by a tanh-encoded mask.
    Product,
    /// Two channels: the slice and a sigmoid-encoded mask, fused at input.
    EarlyFusion,
    /// Two single-channel branches merged after three convolution blocks.
    LateFusion,
}

impl DiscriminatorKind {
    pub const ALL: [DiscriminatorKind; 3] = [
        DiscriminatorKind::Product,
        DiscriminatorKind::EarlyFusion,
        DiscriminatorKind::LateFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiscriminatorKind::Product => "product",
            DiscriminatorKind::EarlyFusion => "early_fusion",
            DiscriminatorKind::LateFusion => "late_fusion",
        }
    }
}

impl std::str::FromStr for DiscriminatorKind {
    type Err = OarsegError;

    fn from_str(s: &str) -> Result<Self> {
        DiscriminatorKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| OarsegError::InvalidConfig(format!("unknown discriminator kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub kind: DiscriminatorKind,
    /// First trunk width; subsequent blocks double it (32 -> 64 -> 128 -> 256
    /// at full scale).
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn full_scale(kind: DiscriminatorKind) -> Self {
        DiscriminatorConfig {
            kind,
            base_channels: 32,
            leaky_slope: 0.2,
        }
    }

    pub fn test_scale(kind: DiscriminatorKind) -> Self {
        DiscriminatorConfig {
            kind,
            base_channels: 4,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticGraph {
    pub config: DiscriminatorConfig,
}

pub fn build_discriminator(config: DiscriminatorConfig, seed: u64) -> (CriticGraph, Parameters) {
    let graph = CriticGraph { config };
    let params = init_parameters(&graph.param_specs(), config.leaky_slope, seed);
    (graph, params)
}

impl CriticGraph {
    pub fn param_specs(&self) -> ParamSpecs {
        let b = self.config.base_channels;
        let mut specs: ParamSpecs = Vec::new();
        let mut push_conv = |prefix: &str, c_in: usize, c_out: usize| {
            specs.push((format!("{prefix}.w"), vec![c_out, c_in, 3, 3]));
            specs.push((format!("{prefix}.b"), vec![c_out]));
        };
        match self.config.kind {
            DiscriminatorKind::Product | DiscriminatorKind::EarlyFusion => {
                let c_in = if self.config.kind == DiscriminatorKind::Product { 1 } else { 2 };
                let widths = [b, 2 * b, 4 * b, 8 * b];
                let mut prev = c_in;
                for (i, w) in widths.into_iter().enumerate() {
                    push_conv(&format!("blk{i}"), prev, w);
                    prev = w;
                }
                specs.push(("head.w".into(), vec![1, 8 * b]));
                specs.push(("head.b".into(), vec![1]));
            }
            DiscriminatorKind::LateFusion => {
                let widths = [b, 2 * b, 4 * b];
                for branch in ["img", "mask"] {
                    let mut prev = 1;
                    for (i, w) in widths.into_iter().enumerate() {
                        push_conv(&format!("{branch}{i}"), prev, w);
                        prev = w;
                    }
                }
                push_conv("joint", 8 * b, 8 * b);
                specs.push(("head.w".into(), vec![1, 8 * b]));
                specs.push(("head.b".into(), vec![1]));
            }
        }
        specs
    }

    /// Scores a batch already encoded for this critic's layout. Product and
    /// early fusion take one NCHW tensor; late fusion takes the image and
    /// mask branches separately. Returns an (N, 1) score node.
    pub fn forward(&self, tape: &mut Tape, bind: &ParamBinding, input: CriticInputNodes) -> NodeId {
        let slope = self.config.leaky_slope;
        let conv = |tape: &mut Tape, x: NodeId, prefix: &str| {
            let c = tape.conv2d(x, bind.get(&format!("{prefix}.w")), bind.get(&format!("{prefix}.b")), 2, 1);
            tape.leaky_relu(c, slope)
        };
        let trunk_out = match (self.config.kind, input) {
            (DiscriminatorKind::Product, CriticInputNodes::Single(x))
            | (DiscriminatorKind::EarlyFusion, CriticInputNodes::Single(x)) => {
                let mut h = x;
                for i in 0..4 {
                    h = conv(tape, h, &format!("blk{i}"));
                }
                h
            }
            (DiscriminatorKind::LateFusion, CriticInputNodes::Pair { image, mask }) => {
                let mut hi = image;
                let mut hm = mask;
                for i in 0..3 {
                    hi = conv(tape, hi, &format!("img{i}"));
                    hm = conv(tape, hm, &format!("mask{i}"));
                }
                let merged = tape.concat_channels(hi, hm);
                conv(tape, merged, "joint")
            }
            (kind, _) => panic!("critic input layout does not match kind {}", kind.name()),
        };
        let pooled = tape.global_avg_pool(trunk_out);
        tape.linear(pooled, bind.get("head.w"), bind.get("head.b"))
    }

    /// Scores plain arrays without retaining gradients. Single-channel
    /// layouts get the mask branch as `None`.
    pub fn score_batch(
        &self,
        params: &Parameters,
        primary: &Array4<f64>,
        mask_branch: Option<&Array4<f64>>,
    ) -> Result<Array1<f64>> {
        if !params.all_finite() {
            return Err(OarsegError::NonFinite("critic parameters"));
        }
        let mut tape = Tape::new();
        let bind = ParamBinding::bind(&mut tape, params);
        let input = match (self.config.kind, mask_branch) {
            (DiscriminatorKind::LateFusion, Some(m)) => {
                let image = tape.leaf4(primary.clone());
                let mask = tape.leaf4(m.clone());
                CriticInputNodes::Pair { image, mask }
            }
            (DiscriminatorKind::LateFusion, None) => {
                return Err(OarsegError::InvalidConfig("late fusion critic needs a mask branch".into()))
            }
            (_, _) => CriticInputNodes::Single(tape.leaf4(primary.clone())),
        };
        let scores = self.forward(&mut tape, &bind, input);
        let v = tape
            .value(scores)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        Ok(v.column(0).to_owned())
    }
}

/// Input nodes for [`CriticGraph::forward`].
#[derive(Clone, Copy)]
pub enum CriticInputNodes {
    Single(NodeId),
    Pair { image: NodeId, mask: NodeId },
}

/// Wraps a (N, H, W)-shaped stack of 2-D arrays into NCHW with C = 1.
pub fn stack_nchw(slices: &[Array2<f64>]) -> Result<Array4<f64>> {
    if slices.is_empty() {
        return Err(OarsegError::EmptyInput("stack_nchw needs at least one slice"));
    }
    let (h, w) = slices[0].dim();
    let mut out = Array4::<f64>::zeros((slices.len(), 1, h, w));
    for (i, s) in slices.iter().enumerate() {
        if s.dim() != (h, w) {
            return Err(OarsegError::ShapeMismatch("inconsistent slice shapes in batch".into()));
        }
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(s);
    }
    Ok(out)
}

/// Interleaves image and mask into a two-channel NCHW batch.
pub fn stack_two_channel(images: &[Array2<f64>], masks: &[Array2<f64>]) -> Result<Array4<f64>> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(OarsegError::ShapeMismatch("image/mask batch length mismatch".into()));
    }
    let (h, w) = images[0].dim();
    let mut out = Array4::<f64>::zeros((images.len(), 2, h, w));
    for (i, (img, m)) in images.iter().zip(masks).enumerate() {
        if img.dim() != (h, w) || m.dim() != (h, w) {
            return Err(OarsegError::ShapeMismatch("inconsistent shapes in two-channel batch".into()));
        }
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(img);
        out.slice_mut(ndarray::s![i, 1, .., ..]).assign(m);
    }
    Ok(out)
}
