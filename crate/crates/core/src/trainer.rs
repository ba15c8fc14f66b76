//! Supervised and adversarial training loops sharing one protocol:
//! Adam (beta1 0.5, beta2 0.999, weight decay 5e-4), batch size 8,
//! learning rate 1e-5 decayed by 0.2 after 10 epochs without validation
//! improvement, early stopping after 14, deterministic seeding throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{breakdown_from, composite_loss_on_tape, encode_early_fusion_gt, encode_product, encode_product_gt};
use crate::autodiff::{sigmoid, Tape};
use crate::dataset::SliceSample;
use crate::error::{OarsegError, Result};
use crate::metrics::dsc_volume;
use crate::models::critic::{stack_nchw, stack_two_channel, CriticGraph, CriticInputNodes};
use crate::models::unet::{ParamBinding, UNetGraph};
use crate::models::{DiscriminatorKind, Parameters};
use crate::optim::{adam_step, AdamHyper, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    Adversarial,
}

/// Everything the training protocol needs; defaults mirror the shared
/// supervised/adversarial recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub discriminator: Option<DiscriminatorKind>,
    /// Weight of the adversarial term in the generator's total loss.
    pub adv_weight: f64,
    /// Critic updates per generator update; 0 freezes the critic.
    pub d_steps: usize,
    /// Optional critic weight clipping bound.
    pub weight_clip: Option<f64>,
    /// Relative decrease of the best validation loss that counts as an
    /// improvement for both schedulers.
    pub improvement_rel: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 5e-4,
            batch_size: 8,
            lr_factor: 0.2,
            lr_patience: 10,
            stop_patience: 14,
            max_epochs: 500,
            seed: 0,
            mode: TrainMode::Supervised,
            discriminator: None,
            adv_weight: 1.0,
            d_steps: 1,
            weight_clip: None,
            improvement_rel: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return Err(OarsegError::InvalidConfig("lr_factor must lie in (0, 1)".into()));
        }
        if self.stop_patience == 0 || self.lr_patience == 0 {
            return Err(OarsegError::InvalidConfig("patience values must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(OarsegError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.mode == TrainMode::Adversarial && self.discriminator.is_none() {
            return Err(OarsegError::InvalidConfig(
                "adversarial mode requires a discriminator kind".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }
}

// ---------------------------------------------------------------------------
// Plateau schedule + early stopping
// ---------------------------------------------------------------------------

/// What one validation observation did to the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauDecision {
    pub improved: bool,
    pub lr_dropped: bool,
    pub stop: bool,
}

/// Pure state machine behind the learning-rate schedule and early stopping.
/// The scheduler counter resets on improvement and on each drop; the early
/// stopping counter resets only on improvement.
#[derive(Debug, Clone)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    pub epochs_since_improvement: usize,
    sched_counter: usize,
}

impl PlateauState {
    pub fn new(lr0: f64) -> Self {
        PlateauState {
            lr: lr0,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
            sched_counter: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64, cfg: &TrainConfig) -> PlateauDecision {
        let improved = val_loss.is_finite()
            && (self.best.is_infinite() || val_loss < self.best * (1.0 - cfg.improvement_rel));
        let mut lr_dropped = false;
        if improved {
            self.best = val_loss;
            self.epochs_since_improvement = 0;
            self.sched_counter = 0;
        } else {
            self.epochs_since_improvement += 1;
            self.sched_counter += 1;
            if self.sched_counter >= cfg.lr_patience {
                self.lr *= cfg.lr_factor;
                self.sched_counter = 0;
                lr_dropped = true;
            }
        }
        PlateauDecision {
            improved,
            lr_dropped,
            stop: self.epochs_since_improvement >= cfg.stop_patience,
        }
    }
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

/// Slices grouped by patient, in stable order; the unit the trainer and
/// evaluator consume.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub samples: Vec<SliceSample>,
    /// patient id -> indices into `samples`, slice order preserved.
    pub patients: Vec<(String, Vec<usize>)>,
}

impl SliceSet {
    pub fn from_samples(samples: Vec<SliceSample>) -> Self {
        let mut patients: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            match patients.iter_mut().find(|(id, _)| *id == s.patient_id) {
                Some((_, idxs)) => idxs.push(i),
                None => patients.push((s.patient_id.clone(), vec![i])),
            }
        }
        SliceSet { samples, patients }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
}

// ---------------------------------------------------------------------------
// Epoch loops
// ---------------------------------------------------------------------------

/// Per-epoch record; exactly the columns of `history.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_bce: f64,
    pub train_adv: f64,
    pub d_objective: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
}

/// Training-loss components of one epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct EpochStats {
    pub train_bce: f64,
    pub train_adv: f64,
    pub d_objective: f64,
}

fn batch_views<'a>(
    set: &'a SliceSet,
    order: &'a [usize],
    batch_size: usize,
) -> impl Iterator<Item = (Vec<&'a Array2<f64>>, Vec<&'a Array2<u8>>)> {
    order.chunks(batch_size).map(move |chunk| {
        let imgs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &set.samples[i].image).collect();
        let gts: Vec<&Array2<u8>> = chunk.iter().map(|&i| &set.samples[i].mask).collect();
        (imgs, gts)
    })
}

fn owned_batch(imgs: &[&Array2<f64>], gts: &[&Array2<u8>]) -> (Vec<Array2<f64>>, Vec<Array2<u8>>) {
    (
        imgs.iter().map(|a| (*a).clone()).collect(),
        gts.iter().map(|g| (*g).clone()).collect(),
    )
}

fn param_grads(
    tape: &Tape,
    grads: &crate::autodiff::Grads,
    bind: &ParamBinding,
) -> BTreeMap<String, ArrayD<f64>> {
    let _ = tape;
    let mut out = BTreeMap::new();
    for (name, &node) in bind.iter() {
        if let Some(g) = grads.get(node) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

/// One supervised epoch: minimizes mean BCE over shuffled batches.
pub fn train_epoch_supervised(
    graph: &UNetGraph,
    params: &mut Parameters,
    opt: &mut AdamState,
    train: &SliceSet,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(OarsegError::EmptyInput("training set is empty"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut n_items = 0usize;
    for (imgs, gts) in batch_views(train, &order, cfg.batch_size) {
        let (imgs, gts) = owned_batch(&imgs, &gts);
        let mut tape = Tape::new();
        let bind = ParamBinding::bind(&mut tape, params);
        let input = tape.leaf4(stack_nchw(&imgs)?);
        let logits = graph.forward(&mut tape, &bind, input);
        let prob = tape.sigmoid(logits);
        let gt_f: Vec<Array2<f64>> = gts.iter().map(|g| g.mapv(|v| v as f64)).collect();
        let target: ArrayD<f64> = stack_nchw(&gt_f)?.into_dyn();
        let loss = tape.bce_mean(prob, target);
        let loss_v = tape.scalar(loss);
        if !loss_v.is_finite() {
            return Err(OarsegError::Diverged(format!("supervised BCE became {loss_v}")));
        }
        if lr != 0.0 {
            let grads = tape.backward(loss);
            let gmap = param_grads(&tape, &grads, &bind);
            adam_step(params, &gmap, opt, cfg.adam(), lr)?;
        }
        loss_sum += loss_v * imgs.len() as f64;
        n_items += imgs.len();
    }
    Ok(EpochStats {
        train_bce: loss_sum / n_items as f64,
        ..Default::default()
    })
}

/// One adversarial epoch: per batch, `d_steps` critic ascents on the
/// absolute score gap over detached generator outputs, then one generator
/// descent on the composite loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_adversarial(
    gen: &UNetGraph,
    gen_params: &mut Parameters,
    critic: &CriticGraph,
    critic_params: &mut Parameters,
    gen_opt: &mut AdamState,
    critic_opt: &mut AdamState,
    train: &SliceSet,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(OarsegError::EmptyInput("training set is empty"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut bce_sum = 0.0;
    let mut adv_sum = 0.0;
    let mut dobj_sum = 0.0;
    let mut n_items = 0usize;
    for (imgs, gts) in batch_views(train, &order, cfg.batch_size) {
        let (imgs, gts) = owned_batch(&imgs, &gts);

        // (a) critic updates on detached generator outputs
        for _ in 0..cfg.d_steps {
            let logits = detached_logits(gen, gen_params, &imgs)?;
            critic_update(critic, critic_params, critic_opt, &imgs, &logits, &gts, cfg, lr)?;
        }

        // (b) generator update on the composite loss
        let mut tape = Tape::new();
        let gen_bind = ParamBinding::bind(&mut tape, gen_params);
        let critic_bind = ParamBinding::bind(&mut tape, critic_params);
        let input = tape.leaf4(stack_nchw(&imgs)?);
        let logits = gen.forward(&mut tape, &gen_bind, input);
        let nodes = composite_loss_on_tape(&mut tape, critic, &critic_bind, logits, &imgs, &gts, cfg.adv_weight)?;
        let breakdown = breakdown_from(&tape, &nodes, cfg.adv_weight);
        if !breakdown.total.is_finite() {
            return Err(OarsegError::Diverged(format!(
                "composite loss became {} (bce {}, adversarial {})",
                breakdown.total, breakdown.bce, breakdown.adversarial
            )));
        }
        if lr != 0.0 {
            let grads = tape.backward(nodes.total);
            let gmap = param_grads(&tape, &grads, &gen_bind);
            adam_step(gen_params, &gmap, gen_opt, cfg.adam(), lr)?;
        }
        let n = imgs.len() as f64;
        bce_sum += breakdown.bce * n;
        adv_sum += breakdown.adversarial * n;
        dobj_sum += breakdown.d_objective * n;
        n_items += imgs.len();
    }
    let n = n_items as f64;
    Ok(EpochStats {
        train_bce: bce_sum / n,
        train_adv: adv_sum / n,
        d_objective: dobj_sum / n,
    })
}

fn detached_logits(gen: &UNetGraph, params: &Parameters, imgs: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    crate::models::unet::generator_forward_batch(gen, params, imgs)
}

fn critic_update(
    critic: &CriticGraph,
    critic_params: &mut Parameters,
    opt: &mut AdamState,
    imgs: &[Array2<f64>],
    logits: &[Array2<f64>],
    gts: &[Array2<u8>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let mut tape = Tape::new();
    let bind = ParamBinding::bind(&mut tape, critic_params);
    let (fake_in, real_in) = match critic.config.kind {
        DiscriminatorKind::Product => {
            let fake: Vec<Array2<f64>> = imgs
                .iter()
                .zip(logits)
                .map(|(im, lg)| encode_product(im, lg))
                .collect::<Result<_>>()?;
            let real: Vec<Array2<f64>> = imgs
                .iter()
                .zip(gts)
                .map(|(im, gt)| encode_product_gt(im, gt))
                .collect::<Result<_>>()?;
            (
                CriticInputNodes::Single(tape.leaf4(stack_nchw(&fake)?)),
                CriticInputNodes::Single(tape.leaf4(stack_nchw(&real)?)),
            )
        }
        DiscriminatorKind::EarlyFusion => {
            let fake_masks: Vec<Array2<f64>> = logits.iter().map(|l| l.mapv(sigmoid)).collect();
            let reals: Vec<[Array2<f64>; 2]> = imgs
                .iter()
                .zip(gts)
                .map(|(im, gt)| encode_early_fusion_gt(im, gt))
                .collect::<Result<_>>()?;
            let real_imgs: Vec<Array2<f64>> = reals.iter().map(|p| p[0].clone()).collect();
            let real_masks: Vec<Array2<f64>> = reals.iter().map(|p| p[1].clone()).collect();
            (
                CriticInputNodes::Single(tape.leaf4(stack_two_channel(imgs, &fake_masks)?)),
                CriticInputNodes::Single(tape.leaf4(stack_two_channel(&real_imgs, &real_masks)?)),
            )
        }
        DiscriminatorKind::LateFusion => {
            let fake_masks: Vec<Array2<f64>> = logits.iter().map(|l| l.mapv(sigmoid)).collect();
            let real_masks: Vec<Array2<f64>> = gts.iter().map(|g| g.mapv(|v| v as f64)).collect();
            let img_node = tape.leaf4(stack_nchw(imgs)?);
            (
                CriticInputNodes::Pair {
                    image: img_node,
                    mask: tape.leaf4(stack_nchw(&fake_masks)?),
                },
                CriticInputNodes::Pair {
                    image: tape.leaf4(stack_nchw(imgs)?),
                    mask: tape.leaf4(stack_nchw(&real_masks)?),
                },
            )
        }
    };
    let fake_scores = critic.forward(&mut tape, &bind, fake_in);
    let real_scores = critic.forward(&mut tape, &bind, real_in);
    let mean_fake = tape.mean_all(fake_scores);
    let mean_real = tape.mean_all(real_scores);
    let gap = tape.sub(mean_fake, mean_real);
    let objective = tape.abs(gap);
    if !tape.scalar(objective).is_finite() {
        return Err(OarsegError::Diverged("critic objective became non-finite".into()));
    }
    if lr != 0.0 {
        let grads = tape.backward(objective);
        // Ascend: feed Adam the negated gradient.
        let mut gmap = param_grads(&tape, &grads, &bind);
        for g in gmap.values_mut() {
            g.mapv_inplace(|v| -v);
        }
        adam_step(critic_params, &gmap, opt, cfg.adam(), lr)?;
        if let Some(c) = cfg.weight_clip {
            critic_params.clip(c);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Validation pass: mean BCE over all slices plus mean per-patient volume
/// DSC of the thresholded predictions.
pub fn validate(graph: &UNetGraph, params: &Parameters, val: &SliceSet, batch_size: usize) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(OarsegError::EmptyInput("validation set is empty"));
    }
    let mut loss_sum = 0.0;
    let mut preds: Vec<Array2<u8>> = Vec::with_capacity(val.len());
    let order: Vec<usize> = (0..val.len()).collect();
    for (imgs, gts) in batch_views(val, &order, batch_size) {
        let (imgs, gts) = owned_batch(&imgs, &gts);
        let logits = crate::models::unet::generator_forward_batch(graph, params, &imgs)?;
        for (lg, gt) in logits.iter().zip(&gts) {
            let prob = lg.mapv(sigmoid);
            loss_sum += crate::adversarial::bce_loss(&prob, gt)?;
            preds.push(lg.mapv(|v| (v >= 0.0) as u8));
        }
    }
    let val_loss = loss_sum / val.len() as f64;

    let mut dsc_sum = 0.0;
    for (_, idxs) in &val.patients {
        let (h, w) = val.samples[idxs[0]].image.dim();
        let mut pred_vol = Array3::<u8>::zeros((idxs.len(), h, w));
        let mut gt_vol = Array3::<u8>::zeros((idxs.len(), h, w));
        for (k, &i) in idxs.iter().enumerate() {
            pred_vol.slice_mut(ndarray::s![k, .., ..]).assign(&preds[i]);
            gt_vol.slice_mut(ndarray::s![k, .., ..]).assign(&val.samples[i].mask);
        }
        dsc_sum += dsc_volume(&pred_vol, &gt_vol)?;
    }
    Ok((val_loss, dsc_sum / val.patients.len() as f64))
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunState {
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best_params: Parameters,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_dsc: f64,
    pub run: RunState,
    /// Set when training ended without any validation improvement.
    pub warning: Option<String>,
    pub critic_params: Option<Parameters>,
}

/// Full training run: epoch loop, plateau schedule, early stopping, best
/// checkpoint selection by validation loss.
pub fn fit(
    graph: &UNetGraph,
    init_params: Parameters,
    critic: Option<(&CriticGraph, Parameters)>,
    train: &SliceSet,
    val: &SliceSet,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Adversarial && critic.is_none() {
        return Err(OarsegError::InvalidConfig("adversarial fit needs a critic".into()));
    }
    let mut params = init_params.clone();
    let mut critic_state = critic.map(|(g, p)| (g, p));
    let mut gen_opt = AdamState::new();
    let mut critic_opt = AdamState::new();
    let mut plateau = PlateauState::new(cfg.lr0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<EpochRecord> = Vec::new();

    // Epoch-0 fallback checkpoint in case validation never improves.
    let mut best: (Parameters, usize, f64, f64) = (init_params, 0, f64::INFINITY, 0.0);
    let mut improved_ever = false;

    let mut epoch = 0usize;
    while epoch < cfg.max_epochs {
        epoch += 1;
        let lr = plateau.lr;
        let stats = match cfg.mode {
            TrainMode::Supervised => {
                train_epoch_supervised(graph, &mut params, &mut gen_opt, train, cfg, lr, &mut rng)?
            }
            TrainMode::Adversarial => {
                let (cg, cp) = critic_state.as_mut().expect("checked above");
                train_epoch_adversarial(
                    graph, &mut params, cg, cp, &mut gen_opt, &mut critic_opt, train, cfg, lr, &mut rng,
                )?
            }
        };
        let (val_loss, val_dsc) = validate(graph, &params, val, cfg.batch_size)?;
        let decision = plateau.observe(val_loss, cfg);
        if decision.improved {
            improved_ever = true;
            best = (params.clone(), epoch, val_loss, val_dsc);
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_bce: stats.train_bce,
            train_adv: stats.train_adv,
            d_objective: stats.d_objective,
            val_loss,
            val_dsc,
        });
        if decision.stop {
            break;
        }
    }

    let warning = (!improved_ever).then(|| {
        format!("no validation improvement in {epoch} epochs; returning epoch-0 parameters")
    });
    let run = RunState {
        epoch,
        current_lr: plateau.lr,
        best_val_loss: plateau.best,
        epochs_since_improvement: plateau.epochs_since_improvement,
        history,
    };
    let (best_params, best_epoch, best_val_loss, best_val_dsc) = best;
    Ok(FitResult {
        best_params,
        best_epoch,
        best_val_loss,
        best_val_dsc,
        run,
        warning,
        critic_params: critic_state.map(|(_, p)| p),
    })
}

// ---------------------------------------------------------------------------
// history.csv
// ---------------------------------------------------------------------------

pub const HISTORY_HEADER: &str = "epoch,lr,train_bce,train_adv,d_objective,val_loss,val_dsc";

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_bce, r.train_adv, r.d_objective, r.val_loss, r.val_dsc
        )
        .expect("string write");
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_to_csv(history)).map_err(|e| OarsegError::io(path, e))
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(OarsegError::InvalidConfig(format!(
                "history.csv line {} has {} fields",
                i + 1,
                fields.len()
            )));
        }
        let f = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| OarsegError::InvalidConfig(format!("history.csv parse: {e}")))
        };
        out.push(EpochRecord {
            epoch: fields[0]
                .parse::<usize>()
                .map_err(|e| OarsegError::InvalidConfig(format!("history.csv parse: {e}")))?,
            lr: f(1)?,
            train_bce: f(2)?,
            train_adv: f(3)?,
            d_objective: f(4)?,
            val_loss: f(5)?,
            val_dsc: f(6)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SliceSample;
    use crate::models::unet::{build_generator, GeneratorConfig};

    fn toy_set(n_patients: usize, slices: usize) -> SliceSet {
        // Bright centered square on dark background; mask = the square.
        let mut samples = Vec::new();
        for p in 0..n_patients {
            for k in 0..slices {
                let mut image = Array2::<f64>::from_elem((8, 8), 0.1);
                let mut mask = Array2::<u8>::zeros((8, 8));
                let off = (p + k) % 2;
                for y in 2 + off..5 + off {
                    for x in 2..6 {
                        image[[y, x]] = 0.9;
                        mask[[y, x]] = 1;
                    }
                }
                samples.push(SliceSample {
                    image,
                    mask,
                    patient_id: format!("p{p}"),
                    slice_index: k,
                });
            }
        }
        SliceSet::from_samples(samples)
    }

    fn tiny_graph(seed: u64) -> (UNetGraph, Parameters) {
        build_generator(
            GeneratorConfig {
                depth: 2,
                base_channels: 4,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (g, mut p) = tiny_graph(0);
        let before = p.clone();
        let set = toy_set(2, 2);
        let cfg = TrainConfig::default();
        let mut opt = AdamState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = train_epoch_supervised(&g, &mut p, &mut opt, &set, &cfg, 0.0, &mut rng).unwrap();
        assert_eq!(before, p);
        assert!(stats.train_bce > 0.0);
    }

    #[test]
    fn epochs_are_deterministic() {
        let run = || {
            let (g, mut p) = tiny_graph(1);
            let set = toy_set(2, 3);
            let cfg = TrainConfig { lr0: 1e-3, ..Default::default() };
            let mut opt = AdamState::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut losses = Vec::new();
            for _ in 0..3 {
                let s =
                    train_epoch_supervised(&g, &mut p, &mut opt, &set, &cfg, cfg.lr0, &mut rng).unwrap();
                losses.push(s.train_bce);
            }
            (losses, p)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn plateau_constant_loss_drops_lr_at_11_stops_at_15() {
        let cfg = TrainConfig::default();
        let mut st = PlateauState::new(1e-5);
        let mut lr_drop_epoch = None;
        let mut stop_epoch = None;
        for epoch in 1..=30 {
            let d = st.observe(0.9, &cfg);
            if d.lr_dropped && lr_drop_epoch.is_none() {
                lr_drop_epoch = Some(epoch);
            }
            if d.stop {
                stop_epoch = Some(epoch);
                break;
            }
        }
        assert_eq!(lr_drop_epoch, Some(11));
        assert_eq!(stop_epoch, Some(15));
        assert!((st.lr - 1e-5 * 0.2).abs() < 1e-20);
    }

    #[test]
    fn plateau_stops_14_after_last_improvement() {
        let cfg = TrainConfig::default();
        let mut st = PlateauState::new(1e-5);
        let mut seq = vec![1.0, 0.9];
        seq.extend(std::iter::repeat(0.9).take(14));
        let mut stopped_at = None;
        for (i, &v) in seq.iter().enumerate() {
            let d = st.observe(v, &cfg);
            if d.stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(16), "improvement at epoch 2, stop 14 later");
    }

    #[test]
    fn plateau_strictly_decreasing_never_drops() {
        let cfg = TrainConfig::default();
        let mut st = PlateauState::new(1e-5);
        let mut loss = 1.0;
        for _ in 0..50 {
            let d = st.observe(loss, &cfg);
            assert!(!d.lr_dropped && !d.stop);
            loss *= 0.99;
        }
        assert_eq!(st.lr, 1e-5);
    }

    #[test]
    fn adversarial_config_requires_discriminator() {
        let cfg = TrainConfig {
            mode: TrainMode::Adversarial,
            discriminator: None,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn history_csv_round_trip() {
        let history = vec![
            EpochRecord {
                epoch: 1,
                lr: 1e-5,
                train_bce: 0.693,
                train_adv: -0.001,
                d_objective: 0.002,
                val_loss: 0.69,
                val_dsc: 0.1,
            },
            EpochRecord {
                epoch: 2,
                lr: 1e-5,
                train_bce: 0.5,
                train_adv: 0.0,
                d_objective: 0.0,
                val_loss: 0.48,
                val_dsc: 0.4,
            },
        ];
        let parsed = parse_history_csv(&history_to_csv(&history)).unwrap();
        assert_eq!(history, parsed);
    }

    #[test]
    fn frozen_zero_critic_reproduces_supervised_trajectory() {
        use crate::models::critic::{build_discriminator, DiscriminatorConfig};
        let set = toy_set(3, 2);
        let val = toy_set(2, 2);
        let base = TrainConfig {
            lr0: 1e-3,
            max_epochs: 3,
            ..Default::default()
        };

        let (g, p) = tiny_graph(5);
        let sup = fit(&g, p.clone(), None, &set, &val, &base).unwrap();

        let (cg, mut cp) = build_discriminator(
            DiscriminatorConfig::test_scale(DiscriminatorKind::Product),
            9,
        );
        for (_, v) in cp.iter_mut() {
            v.fill(0.0); // constant-zero critic
        }
        let adv_cfg = TrainConfig {
            mode: TrainMode::Adversarial,
            discriminator: Some(DiscriminatorKind::Product),
            d_steps: 0, // frozen
            ..base
        };
        let adv = fit(&g, p, Some((&cg, cp)), &set, &val, &adv_cfg).unwrap();
        for (a, b) in sup.run.history.iter().zip(adv.run.history.iter()) {
            assert!((a.train_bce - b.train_bce).abs() < 1e-12);
            assert!((a.val_loss - b.val_loss).abs() < 1e-12);
            assert_eq!(a.val_dsc, b.val_dsc);
        }
        assert_eq!(sup.best_params, adv.best_params);
    }
}
