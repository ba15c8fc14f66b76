//! The shared U-Net generator and the squeeze-excitation residual variant
//! used as the supervised baseline. Both map a single-channel slice to a
//! single-channel logit map of the same spatial size.

use ndarray::{Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{OarsegError, Result};
use crate::models::params::{init_parameters, ParamSpecs, Parameters};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of resolution levels including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        // Full-scale defaults; tests use `GeneratorConfig::test_scale()`.
        GeneratorConfig {
            depth: 5,
            base_channels: 64,
            leaky_slope: 0.2,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn test_scale() -> Self {
        GeneratorConfig {
            depth: 3,
            base_channels: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(OarsegError::InvalidConfig("generator depth must be >= 2".into()));
        }
        if self.base_channels < 4 {
            return Err(OarsegError::InvalidConfig("generator base_channels must be >= 4".into()));
        }
        if !(0.0 < self.leaky_slope && self.leaky_slope < 1.0) {
            return Err(OarsegError::InvalidConfig("leaky_slope must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Convolution block used at each U-Net level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convolutions, each followed by leaky ReLU.
    ConvPair,
    /// Residual pair with a channelwise squeeze-excitation gate.
    ResidualSe { reduction: usize },
}

/// U-Net computation graph; parameters live in a separate [`Parameters`].
#[derive(Debug, Clone)]
pub struct UNetGraph {
    pub config: GeneratorConfig,
    pub block: BlockKind,
}

/// Builds the adversarial/supervised generator (plain conv pairs).
pub fn build_generator(config: GeneratorConfig, seed: u64) -> Result<(UNetGraph, Parameters)> {
    config.validate()?;
    let graph = UNetGraph {
        config,
        block: BlockKind::ConvPair,
    };
    let params = init_parameters(&graph.param_specs(), config.leaky_slope, seed);
    Ok((graph, params))
}

/// Builds one of the two supervised baselines by name.
pub fn build_baseline(name: &str, config: GeneratorConfig, seed: u64) -> Result<(UNetGraph, Parameters)> {
    match name {
        "unet_supervised" => build_generator(config, seed),
        "se_resunet" => {
            config.validate()?;
            let reduction = se_reduction_for(config.base_channels);
            let graph = UNetGraph {
                config,
                block: BlockKind::ResidualSe { reduction },
            };
            let params = init_parameters(&graph.param_specs(), config.leaky_slope, seed);
            Ok((graph, params))
        }
        other => Err(OarsegError::UnknownModel(other.to_string())),
    }
}

/// Largest reduction in {16, 8, 4, 2, 1} that divides `base_channels`
/// (and therefore every level's channel count).
pub fn se_reduction_for(base_channels: usize) -> usize {
    [16, 8, 4, 2]
        .into_iter()
        .find(|r| base_channels % r == 0)
        .unwrap_or(1)
}

impl UNetGraph {
    /// Each of the `depth` encoder levels halves the spatial dims, so every
    /// pooling stage must see even sizes.
    pub fn divisor(&self) -> usize {
        1 << self.config.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(OarsegError::SpatialDivisibility {
                dims: (h, w),
                divisor: d,
                depth: self.config.depth,
            });
        }
        Ok(())
    }

    /// Ordered parameter names and shapes.
    pub fn param_specs(&self) -> ParamSpecs {
        let cfg = &self.config;
        let mut specs: ParamSpecs = Vec::new();
        let mut push_block = |prefix: &str, c_in: usize, c_out: usize| {
            specs.push((format!("{prefix}.conv1.w"), vec![c_out, c_in, 3, 3]));
            specs.push((format!("{prefix}.conv1.b"), vec![c_out]));
            specs.push((format!("{prefix}.conv2.w"), vec![c_out, c_out, 3, 3]));
            specs.push((format!("{prefix}.conv2.b"), vec![c_out]));
            if let BlockKind::ResidualSe { reduction } = self.block {
                if c_in != c_out {
                    specs.push((format!("{prefix}.proj.w"), vec![c_out, c_in, 1, 1]));
                    specs.push((format!("{prefix}.proj.b"), vec![c_out]));
                }
                let mid = (c_out / reduction).max(1);
                specs.push((format!("{prefix}.se.fc1.w"), vec![mid, c_out]));
                specs.push((format!("{prefix}.se.fc1.b"), vec![mid]));
                specs.push((format!("{prefix}.se.fc2.w"), vec![c_out, mid]));
                specs.push((format!("{prefix}.se.fc2.b"), vec![c_out]));
            }
        };

        let mut c_prev = cfg.in_channels;
        for level in 0..cfg.depth {
            let c = cfg.channels(level);
            push_block(&format!("enc{level}"), c_prev, c);
            c_prev = c;
        }
        for level in (0..cfg.depth).rev() {
            let c = cfg.channels(level);
            // Deepest decoder level receives the pooled last encoder output;
            // the others receive the previous decoder level, upsampled.
            let c_up = if level + 1 == cfg.depth {
                cfg.channels(cfg.depth - 1)
            } else {
                cfg.channels(level + 1)
            };
            push_block(&format!("dec{level}"), c_up + c, c);
        }
        specs.push(("head.w".into(), vec![cfg.out_channels, cfg.base_channels, 1, 1]));
        specs.push(("head.b".into(), vec![cfg.out_channels]));
        specs
    }

    /// Forward pass on the tape; returns the logit-map node (N, 1, H, W).
    ///
    /// Every encoder level runs its block and then downsamples; the decoder
    /// mirrors this with nearest-neighbor upsampling and skip concatenation.
    pub fn forward(&self, tape: &mut Tape, bind: &ParamBinding, input: NodeId) -> NodeId {
        let cfg = &self.config;
        let slope = cfg.leaky_slope;
        let mut skips: Vec<NodeId> = Vec::with_capacity(cfg.depth);
        let mut x = input;
        for level in 0..cfg.depth {
            x = self.block(tape, bind, &format!("enc{level}"), x, slope);
            skips.push(x);
            x = tape.max_pool2(x);
        }
        for level in (0..cfg.depth).rev() {
            x = tape.upsample2(x);
            x = tape.concat_channels(x, skips[level]);
            x = self.block(tape, bind, &format!("dec{level}"), x, slope);
        }
        tape.conv2d(x, bind.get("head.w"), bind.get("head.b"), 1, 0)
    }

    fn block(&self, tape: &mut Tape, bind: &ParamBinding, prefix: &str, input: NodeId, slope: f64) -> NodeId {
        match self.block {
            BlockKind::ConvPair => {
                let c1 = tape.conv2d(
                    input,
                    bind.get(&format!("{prefix}.conv1.w")),
                    bind.get(&format!("{prefix}.conv1.b")),
                    1,
                    1,
                );
                let a1 = tape.leaky_relu(c1, slope);
                let c2 = tape.conv2d(
                    a1,
                    bind.get(&format!("{prefix}.conv2.w")),
                    bind.get(&format!("{prefix}.conv2.b")),
                    1,
                    1,
                );
                tape.leaky_relu(c2, slope)
            }
            BlockKind::ResidualSe { .. } => {
                let c1 = tape.conv2d(
                    input,
                    bind.get(&format!("{prefix}.conv1.w")),
                    bind.get(&format!("{prefix}.conv1.b")),
                    1,
                    1,
                );
                let a1 = tape.leaky_relu(c1, slope);
                let c2 = tape.conv2d(
                    a1,
                    bind.get(&format!("{prefix}.conv2.w")),
                    bind.get(&format!("{prefix}.conv2.b")),
                    1,
                    1,
                );
                let shortcut = if bind.has(&format!("{prefix}.proj.w")) {
                    tape.conv2d(
                        input,
                        bind.get(&format!("{prefix}.proj.w")),
                        bind.get(&format!("{prefix}.proj.b")),
                        1,
                        0,
                    )
                } else {
                    input
                };
                let summed = tape.add(c2, shortcut);
                let act = tape.leaky_relu(summed, slope);
                se_gate(
                    tape,
                    act,
                    bind.get(&format!("{prefix}.se.fc1.w")),
                    bind.get(&format!("{prefix}.se.fc1.b")),
                    bind.get(&format!("{prefix}.se.fc2.w")),
                    bind.get(&format!("{prefix}.se.fc2.b")),
                )
            }
        }
    }

    pub fn architecture_name(&self) -> &'static str {
        match self.block {
            BlockKind::ConvPair => "unet",
            BlockKind::ResidualSe { .. } => "se_resunet",
        }
    }
}

/// Squeeze-excitation gating on the tape: global average pool, bottleneck
/// dense pair (ReLU inside), sigmoid gates, channelwise rescale.
pub fn se_gate(
    tape: &mut Tape,
    features: NodeId,
    fc1_w: NodeId,
    fc1_b: NodeId,
    fc2_w: NodeId,
    fc2_b: NodeId,
) -> NodeId {
    let pooled = tape.global_avg_pool(features);
    let h1 = tape.linear(pooled, fc1_w, fc1_b);
    let a1 = tape.relu(h1);
    let h2 = tape.linear(a1, fc2_w, fc2_b);
    let gates = tape.sigmoid(h2);
    tape.mul_channel(features, gates)
}

/// Standalone squeeze-excitation block over a channel-major feature array,
/// matching [`se_gate`] with its own owned weights.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub params: Parameters,
}

impl SeBlock {
    pub fn specs(channels: usize, reduction: usize) -> ParamSpecs {
        let mid = channels / reduction;
        vec![
            ("se.fc1.w".into(), vec![mid, channels]),
            ("se.fc1.b".into(), vec![mid]),
            ("se.fc2.w".into(), vec![channels, mid]),
            ("se.fc2.b".into(), vec![channels]),
        ]
    }

    pub fn new(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(OarsegError::InvalidConfig(format!(
                "se_block: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        Ok(SeBlock {
            channels,
            reduction,
            params: init_parameters(&Self::specs(channels, reduction), 0.2, seed),
        })
    }

    /// All-zero gate layers: every gate is sigmoid(0) = 0.5.
    pub fn zero_init(channels: usize, reduction: usize) -> Result<Self> {
        let mut blk = Self::new(channels, reduction, 0)?;
        for (_, v) in blk.params.iter_mut() {
            v.fill(0.0);
        }
        Ok(blk)
    }

    /// Applies the gate to a (C, H, W) feature array.
    pub fn apply(&self, features: &ndarray::Array3<f64>) -> Result<ndarray::Array3<f64>> {
        let (c, h, w) = features.dim();
        if c != self.channels {
            return Err(OarsegError::ShapeMismatch(format!(
                "se_block expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut tape = Tape::new();
        let f4 = features
            .to_shape((1, c, h, w))
            .expect("reshape")
            .to_owned();
        let fid = tape.leaf4(f4);
        let fc1_w = tape.leaf(self.params.get("se.fc1.w").clone());
        let fc1_b = tape.leaf(self.params.get("se.fc1.b").clone());
        let fc2_w = tape.leaf(self.params.get("se.fc2.w").clone());
        let fc2_b = tape.leaf(self.params.get("se.fc2.b").clone());
        let out = se_gate(&mut tape, fid, fc1_w, fc1_b, fc2_w, fc2_b);
        let out4 = tape
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        Ok(out4.index_axis(ndarray::Axis(0), 0).to_owned())
    }
}

/// Name -> tape leaf bindings for one forward pass.
pub struct ParamBinding {
    nodes: std::collections::BTreeMap<String, NodeId>,
}

impl ParamBinding {
    /// Loads every parameter onto the tape as a leaf.
    pub fn bind(tape: &mut Tape, params: &Parameters) -> Self {
        let mut nodes = std::collections::BTreeMap::new();
        for (name, value) in params.iter() {
            nodes.insert(name.clone(), tape.leaf(value.clone()));
        }
        ParamBinding { nodes }
    }

    pub fn get(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

/// Runs the generator on a batch of slice images, returning logit maps.
///
/// Validates divisibility and parameter finiteness; the heavy lifting is
/// [`UNetGraph::forward`] on a throwaway tape.
pub fn generator_forward_batch(
    graph: &UNetGraph,
    params: &Parameters,
    images: &[Array2<f64>],
) -> Result<Vec<Array2<f64>>> {
    if images.is_empty() {
        return Err(OarsegError::EmptyInput("generator_forward_batch needs at least one image"));
    }
    let (h, w) = images[0].dim();
    graph.check_input(h, w)?;
    if !params.all_finite() {
        return Err(OarsegError::NonFinite("generator parameters"));
    }
    let mut batch = Array4::<f64>::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w) {
            return Err(OarsegError::ShapeMismatch("inconsistent batch image shapes".into()));
        }
        batch.slice_mut(ndarray::s![i, 0, .., ..]).assign(img);
    }
    let mut tape = Tape::new();
    let bind = ParamBinding::bind(&mut tape, params);
    let input = tape.leaf4(batch);
    let logits = graph.forward(&mut tape, &bind, input);
    let out: ArrayD<f64> = tape.value(logits).clone();
    let out4 = out.into_dimensionality::<ndarray::Ix4>().unwrap();
    Ok((0..images.len())
        .map(|i| out4.slice(ndarray::s![i, 0, .., ..]).to_owned())
        .collect())
}

/// Single-slice convenience wrapper around [`generator_forward_batch`].
pub fn generator_forward(graph: &UNetGraph, params: &Parameters, image: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(generator_forward_batch(graph, params, std::slice::from_ref(image))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use ndarray::Array2;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let (g, p) = build_generator(tiny_cfg(), 0).unwrap();
        let img = Array2::from_elem((16, 16), 0.3);
        let out = generator_forward(&g, &p, &img).unwrap();
        assert_eq!(out.dim(), (16, 16));
    }

    #[test]
    fn divisibility_is_enforced() {
        let cfg = GeneratorConfig {
            depth: 3,
            base_channels: 4,
            ..Default::default()
        };
        let (g, p) = build_generator(cfg, 0).unwrap();
        let img = Array2::from_elem((20, 20), 0.3);
        assert!(matches!(
            generator_forward(&g, &p, &img),
            Err(OarsegError::SpatialDivisibility { .. })
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let (_, p1) = build_generator(tiny_cfg(), 5).unwrap();
        let (_, p2) = build_generator(tiny_cfg(), 5).unwrap();
        let (_, p3) = build_generator(tiny_cfg(), 6).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, p3);
    }

    #[test]
    fn zero_biases_give_zero_logits_on_zero_image() {
        let (g, p) = build_generator(tiny_cfg(), 3).unwrap();
        let img = Array2::zeros((8, 8));
        let out = generator_forward(&g, &p, &img).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_of_logits_is_in_open_unit_interval() {
        let (g, p) = build_generator(tiny_cfg(), 11).unwrap();
        let img = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) as f64) / 64.0);
        let out = generator_forward(&g, &p, &img).unwrap();
        assert!(out.iter().all(|&v| {
            let s = sigmoid(v);
            s > 0.0 && s < 1.0
        }));
    }

    #[test]
    fn baseline_names() {
        let cfg = tiny_cfg();
        let (gu, pu) = build_baseline("unet_supervised", cfg, 0).unwrap();
        let (gg, pg) = build_generator(cfg, 0).unwrap();
        assert_eq!(pu, pg);
        assert_eq!(gu.architecture_name(), gg.architecture_name());

        let (gs, ps) = build_baseline("se_resunet", cfg, 0).unwrap();
        assert_eq!(gs.architecture_name(), "se_resunet");
        let img = Array2::from_elem((16, 16), 0.4);
        let out = generator_forward(&gs, &ps, &img).unwrap();
        assert_eq!(out.dim(), (16, 16));

        assert!(matches!(
            build_baseline("deeplabv3", cfg, 0),
            Err(OarsegError::UnknownModel(_))
        ));
    }

    #[test]
    fn se_block_zero_init_halves_features() {
        let blk = SeBlock::zero_init(4, 2).unwrap();
        let f = ndarray::Array3::from_shape_fn((4, 3, 3), |(c, y, x)| (c + y + x) as f64 - 2.0);
        let out = blk.apply(&f).unwrap();
        for (a, b) in f.iter().zip(out.iter()) {
            assert!((b - 0.5 * a).abs() < 1e-15);
        }
    }

    #[test]
    fn se_block_zero_features_stay_zero() {
        let blk = SeBlock::new(4, 2, 1).unwrap();
        let f = ndarray::Array3::zeros((4, 3, 3));
        let out = blk.apply(&f).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_block_scales_each_channel_uniformly() {
        let blk = SeBlock::new(4, 2, 2).unwrap();
        let f = ndarray::Array3::from_shape_fn((4, 3, 3), |(c, y, x)| {
            1.0 + (c as f64) * 0.3 + ((y * 3 + x) as f64) * 0.05
        });
        let out = blk.apply(&f).unwrap();
        for c in 0..4 {
            let ratios: Vec<f64> = f
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .zip(out.index_axis(ndarray::Axis(0), c).iter())
                .map(|(a, b)| b / a)
                .collect();
            for r in &ratios {
                assert!((r - ratios[0]).abs() < 1e-12, "channel gate must be constant");
                assert!(*r > 0.0 && *r < 1.0);
            }
        }
    }

    #[test]
    fn se_block_rejects_bad_reduction() {
        assert!(SeBlock::new(6, 4, 0).is_err());
    }
}
