//! Config-driven experiment grids: train each (organ, model) cell, evaluate
//! on the held-out patients, render Table-1/Table-2-style reports, and
//! optionally fuse per-paradigm ensembles. Cell failures are recorded and
//! do not abort the rest of the grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::{extract_slices, split_dataset, HuWindow};
use crate::ensemble::{
    evaluate_ensemble, select_ensemble_members, EnsembleReport, FusionPatient, MemberCandidate,
    MemberModels,
};
use crate::error::{OarsegError, Result};
use crate::io::load_dataset;
use crate::metrics::{aggregate_patients, dsc_volume, hd95_patient, MetricRow, PatientHd};
use crate::models::critic::{build_discriminator, DiscriminatorConfig};
use crate::models::unet::{build_baseline, build_generator, generator_forward_batch, BlockKind, GeneratorConfig, UNetGraph};
use crate::models::{load_checkpoint, save_checkpoint, CheckpointManifest, DiscriminatorKind, Parameters};
use crate::organs::OrganId;
use crate::report::{render_ensemble_markdown, render_table_csv, render_table_markdown};
use crate::trainer::{fit, write_history_csv, SliceSet, TrainConfig, TrainMode};
use crate::volume::{CtVolume, LabelVolume};

/// The five trainable model names exposed on the CLI and in plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelName {
    Unet,
    SeResunet,
    GanProd,
    GanEarly,
    GanLate,
}

impl ModelName {
    pub const ALL: [ModelName; 5] = [
        ModelName::Unet,
        ModelName::SeResunet,
        ModelName::GanProd,
        ModelName::GanEarly,
        ModelName::GanLate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelName::Unet => "unet",
            ModelName::SeResunet => "se-resunet",
            ModelName::GanProd => "gan-prod",
            ModelName::GanEarly => "gan-early",
            ModelName::GanLate => "gan-late",
        }
    }

    pub fn discriminator(self) -> Option<DiscriminatorKind> {
        match self {
            ModelName::GanProd => Some(DiscriminatorKind::Product),
            ModelName::GanEarly => Some(DiscriminatorKind::EarlyFusion),
            ModelName::GanLate => Some(DiscriminatorKind::LateFusion),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelName {
    type Err = OarsegError;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| OarsegError::UnknownModel(s.to_string()))
    }
}

impl std::fmt::Display for ModelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture scale shared by every cell of a plan.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelScale {
    pub depth: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub disc_base_channels: usize,
}

impl Default for ModelScale {
    fn default() -> Self {
        ModelScale {
            depth: 5,
            base_channels: 64,
            leaky_slope: 0.2,
            disc_base_channels: 32,
        }
    }
}

impl ModelScale {
    pub fn test_scale() -> Self {
        ModelScale {
            depth: 3,
            base_channels: 8,
            leaky_slope: 0.2,
            disc_base_channels: 4,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            leaky_slope: self.leaky_slope,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn discriminator_config(&self, kind: DiscriminatorKind) -> DiscriminatorConfig {
        DiscriminatorConfig {
            kind,
            base_channels: self.disc_base_channels,
            leaky_slope: self.leaky_slope,
        }
    }
}

/// A full experiment description, usually parsed from TOML.
#[derive(Debug, Clone, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub organs: Vec<String>,
    pub models: Vec<String>,
    #[serde(default = "default_report_formats")]
    pub report_formats: Vec<String>,
    #[serde(default)]
    pub window: Option<(f64, f64)>,
    #[serde(default)]
    pub model: ModelScale,
    #[serde(default)]
    pub train: TrainConfig,
    /// Ensemble name -> member model names; each group picks its best
    /// member per organ by validation DSC.
    #[serde(default)]
    pub ensembles: BTreeMap<String, Vec<String>>,
}

fn default_report_formats() -> Vec<String> {
    vec!["csv".into(), "md".into()]
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<ExperimentPlan> {
        toml::from_str(text).map_err(|e| OarsegError::InvalidPlan(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ExperimentPlan> {
        let text = fs::read_to_string(path).map_err(|e| OarsegError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn parsed_organs(&self) -> Result<Vec<OrganId>> {
        if self.organs.is_empty() {
            return Err(OarsegError::InvalidPlan("plan lists no organs".into()));
        }
        self.organs.iter().map(|s| s.parse::<OrganId>()).collect()
    }

    pub fn parsed_models(&self) -> Result<Vec<ModelName>> {
        if self.models.is_empty() {
            return Err(OarsegError::InvalidPlan("plan lists no models".into()));
        }
        self.models.iter().map(|s| s.parse::<ModelName>()).collect()
    }

    pub fn hu_window(&self) -> Result<HuWindow> {
        match self.window {
            Some((lo, hi)) => HuWindow::new(lo, hi),
            None => Ok(HuWindow::default()),
        }
    }
}

/// Architecture description persisted inside checkpoint manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub config: GeneratorConfig,
    pub block: BlockKind,
}

impl ArchSpec {
    pub fn graph(&self) -> UNetGraph {
        UNetGraph {
            config: self.config,
            block: self.block,
        }
    }
}

/// Rebuilds the generator graph stored in a checkpoint manifest.
pub fn graph_from_manifest(manifest: &CheckpointManifest) -> Result<UNetGraph> {
    let arch: ArchSpec = serde_json::from_value(manifest.config.clone()).map_err(|e| {
        OarsegError::InvalidConfig(format!("checkpoint config does not describe a known architecture: {e}"))
    })?;
    Ok(arch.graph())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Thresholds each slice prediction at probability 0.5, stacks per patient,
/// and computes volume DSC plus per-patient HD95 (in-plane `spacing`).
pub fn evaluate_model(
    graph: &UNetGraph,
    params: &Parameters,
    test: &SliceSet,
    spacing: (f64, f64),
    batch_size: usize,
) -> Result<Vec<(String, f64, PatientHd)>> {
    if test.is_empty() {
        return Err(OarsegError::EmptyInput("evaluate_model needs a non-empty test set"));
    }
    let mut out = Vec::with_capacity(test.patients.len());
    for (pid, idxs) in &test.patients {
        let (h, w) = test.samples[idxs[0]].image.dim();
        let mut pred = Array3::<u8>::zeros((idxs.len(), h, w));
        let mut gt = Array3::<u8>::zeros((idxs.len(), h, w));
        for chunk in idxs.chunks(batch_size.max(1)) {
            let imgs: Vec<_> = chunk.iter().map(|&i| test.samples[i].image.clone()).collect();
            let logits = generator_forward_batch(graph, params, &imgs)?;
            for (j, &i) in chunk.iter().enumerate() {
                let k = idxs.iter().position(|&x| x == i).expect("index in patient");
                pred.slice_mut(ndarray::s![k, .., ..])
                    .assign(&logits[j].mapv(|v| (v >= 0.0) as u8));
                gt.slice_mut(ndarray::s![k, .., ..]).assign(&test.samples[i].mask);
            }
        }
        let dsc = dsc_volume(&pred, &gt)?;
        let hd = hd95_patient(&pred, &gt, spacing)?;
        out.push((pid.clone(), dsc, hd));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub organ: String,
    pub model: String,
    pub status: String,
    pub val_dsc: f64,
    pub checkpoint: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellOutcome>,
    pub rows: Vec<MetricRow>,
    pub ensembles: Vec<(String, EnsembleReport)>,
    pub any_failed: bool,
}

struct PreparedData {
    train: SliceSet,
    val: SliceSet,
    test: SliceSet,
}

fn subset<'a>(
    volumes: &'a [(CtVolume, LabelVolume)],
    ids: &[String],
) -> Vec<&'a (CtVolume, LabelVolume)> {
    ids.iter()
        .filter_map(|id| volumes.iter().find(|(ct, _)| &ct.patient_id == id))
        .collect()
}

fn slices_for(
    volumes: &[&(CtVolume, LabelVolume)],
    organ: OrganId,
    window: HuWindow,
) -> Result<SliceSet> {
    let mut samples = Vec::new();
    for (ct, lv) in volumes {
        samples.extend(extract_slices(ct, lv, organ, window)?);
    }
    Ok(SliceSet::from_samples(samples))
}

fn cell_seed(base: u64, organ: OrganId, model_idx: usize) -> u64 {
    base.wrapping_mul(6364136223846793005)
        .wrapping_add(organ.code() as u64 * 1024 + model_idx as u64 + 1)
}

/// Trains and evaluates every cell of the plan, writes all artifacts under
/// `plan.output`, and returns the collected outcome.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    let organs = plan.parsed_organs()?;
    let models = plan.parsed_models()?;
    plan.train.validate().map_err(|e| OarsegError::InvalidPlan(e.to_string()))?;
    for (group, members) in &plan.ensembles {
        if members.is_empty() {
            return Err(OarsegError::InvalidPlan(format!("ensemble {group:?} has no members")));
        }
        for m in members {
            let model: ModelName = m.parse().map_err(|_| {
                OarsegError::InvalidPlan(format!("ensemble {group:?} references unknown model {m:?}"))
            })?;
            if !plan.models.iter().any(|pm| pm == model.name()) {
                return Err(OarsegError::InvalidPlan(format!(
                    "ensemble {group:?} member {m:?} is not in the plan's model list"
                )));
            }
        }
    }
    let window = plan.hu_window()?;

    let volumes = load_dataset(&plan.dataset)?;
    if volumes.is_empty() {
        return Err(OarsegError::InvalidPlan(format!(
            "dataset {} contains no patients",
            plan.dataset.display()
        )));
    }
    let ids: Vec<String> = volumes.iter().map(|(ct, _)| ct.patient_id.clone()).collect();
    let split = split_dataset(&ids, plan.train.seed)?;
    fs::create_dir_all(&plan.output).map_err(|e| OarsegError::io(&plan.output, e))?;
    let split_path = plan.output.join("split.json");
    fs::write(
        &split_path,
        serde_json::to_string_pretty(&split).expect("split serializes"),
    )
    .map_err(|e| OarsegError::io(&split_path, e))?;

    let spacing = {
        let s = volumes[0].0.spacing;
        (s[1], s[2])
    };

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut candidates: Vec<(ModelName, MemberCandidate)> = Vec::new();
    let mut any_failed = false;

    for organ in &organs {
        let data = PreparedData {
            train: slices_for(&subset(&volumes, &split.train_ids), *organ, window)?,
            val: slices_for(&subset(&volumes, &split.val_ids), *organ, window)?,
            test: slices_for(&subset(&volumes, &split.test_ids), *organ, window)?,
        };
        for (model_idx, model) in models.iter().enumerate() {
            let cell_dir = plan.output.join(organ.name()).join(model.name());
            match run_cell(plan, *organ, *model, model_idx, &data, &cell_dir, spacing) {
                Ok((row, val_dsc, ckpt_dir)) => {
                    candidates.push((
                        *model,
                        MemberCandidate {
                            organ: *organ,
                            checkpoint: ckpt_dir.clone(),
                            val_dsc,
                            test_dsc: Some(row.dsc_mean),
                        },
                    ));
                    rows.push(row);
                    cells.push(CellOutcome {
                        organ: organ.name().into(),
                        model: model.name().into(),
                        status: "ok".into(),
                        val_dsc,
                        checkpoint: Some(ckpt_dir),
                        error: None,
                    });
                }
                Err(e) => {
                    any_failed = true;
                    cells.push(CellOutcome {
                        organ: organ.name().into(),
                        model: model.name().into(),
                        status: "failed".into(),
                        val_dsc: f64::NAN,
                        checkpoint: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }

    // Reports for the binary grid.
    if plan.report_formats.iter().any(|f| f == "csv") {
        let path = plan.output.join("report.csv");
        fs::write(&path, render_table_csv(&rows)).map_err(|e| OarsegError::io(&path, e))?;
    }
    if plan.report_formats.iter().any(|f| f == "md") {
        let path = plan.output.join("report.md");
        fs::write(&path, render_table_markdown(&rows)).map_err(|e| OarsegError::io(&path, e))?;
    }

    // Ensemble stage.
    let mut ensembles = Vec::new();
    if !plan.ensembles.is_empty() {
        let test_patients = fusion_patients(&volumes, &split.test_ids, window)?;
        for (group, member_names) in &plan.ensembles {
            let member_models: Vec<ModelName> = member_names
                .iter()
                .map(|m| m.parse::<ModelName>().expect("validated above"))
                .collect();
            let group_candidates: Vec<MemberCandidate> = candidates
                .iter()
                .filter(|(m, _)| member_models.contains(m))
                .map(|(_, c)| c.clone())
                .collect();
            match fuse_group(&group_candidates, &test_patients) {
                Ok(report) => ensembles.push((group.clone(), report)),
                Err(e) => {
                    any_failed = true;
                    cells.push(CellOutcome {
                        organ: "-".into(),
                        model: format!("ensemble:{group}"),
                        status: "failed".into(),
                        val_dsc: f64::NAN,
                        checkpoint: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        if !ensembles.is_empty() {
            let columns: Vec<(String, [f64; 6], f64)> = ensembles
                .iter()
                .map(|(name, r)| (name.clone(), r.per_organ_dsc, r.mean))
                .collect();
            let md_path = plan.output.join("ensemble_report.md");
            fs::write(&md_path, render_ensemble_markdown(&columns))
                .map_err(|e| OarsegError::io(&md_path, e))?;
            let csv_path = plan.output.join("ensemble_report.csv");
            let mut csv = String::from("ensemble,right_lung,left_lung,heart,trachea,spinal_cord,esophagus,mean\n");
            for (name, r) in &ensembles {
                let o = &r.per_organ_dsc;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    name, o[0], o[1], o[2], o[3], o[4], o[5], r.mean
                ));
            }
            fs::write(&csv_path, csv).map_err(|e| OarsegError::io(&csv_path, e))?;
        }
    }

    let summary_path = plan.output.join("cells.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&cells).expect("cells serialize"),
    )
    .map_err(|e| OarsegError::io(&summary_path, e))?;

    Ok(ExperimentOutcome {
        cells,
        rows,
        ensembles,
        any_failed,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    plan: &ExperimentPlan,
    organ: OrganId,
    model: ModelName,
    model_idx: usize,
    data: &PreparedData,
    cell_dir: &Path,
    spacing: (f64, f64),
) -> Result<(MetricRow, f64, PathBuf)> {
    let seed = cell_seed(plan.train.seed, organ, model_idx);
    let gen_cfg = plan.model.generator_config();
    let (graph, params, block) = match model {
        ModelName::SeResunet => {
            let (g, p) = build_baseline("se_resunet", gen_cfg, seed)?;
            let block = g.block;
            (g, p, block)
        }
        _ => {
            let (g, p) = build_generator(gen_cfg, seed)?;
            let block = g.block;
            (g, p, block)
        }
    };
    if let Some(sample) = data.train.samples.first() {
        let (h, w) = sample.image.dim();
        graph.check_input(h, w)?;
    }

    let mut cfg = plan.train.clone();
    cfg.seed = seed;
    let critic_built;
    let critic = match model.discriminator() {
        Some(kind) => {
            cfg.mode = TrainMode::Adversarial;
            cfg.discriminator = Some(kind);
            let (cg, cp) = build_discriminator(
                plan.model.discriminator_config(kind),
                seed.wrapping_add(0x9E37),
            );
            critic_built = cg;
            Some((&critic_built, cp))
        }
        None => {
            cfg.mode = TrainMode::Supervised;
            cfg.discriminator = None;
            None
        }
    };

    let result = fit(&graph, params, critic, &data.train, &data.val, &cfg)?;

    fs::create_dir_all(cell_dir).map_err(|e| OarsegError::io(cell_dir, e))?;
    write_history_csv(&cell_dir.join("history.csv"), &result.run.history)?;
    let ckpt_dir = cell_dir.join("checkpoint");
    let manifest = CheckpointManifest {
        architecture: graph.architecture_name().into(),
        config: serde_json::to_value(ArchSpec { config: gen_cfg, block }).expect("arch serializes"),
        seed,
        epoch: result.best_epoch,
        val_loss: result.best_val_loss,
        val_dsc: result.best_val_dsc,
        params: BTreeMap::new(),
    };
    save_checkpoint(&ckpt_dir, &manifest, &result.best_params)?;

    let per_patient = evaluate_model(&graph, &result.best_params, &data.test, spacing, cfg.batch_size)?;
    let stats: Vec<(f64, PatientHd)> = per_patient.iter().map(|(_, d, h)| (*d, *h)).collect();
    let row = aggregate_patients(organ.name(), model.name(), &stats)?;
    Ok((row, result.best_val_dsc, ckpt_dir))
}

/// Builds multi-class fusion inputs for the listed patients.
pub fn fusion_patients(
    volumes: &[(CtVolume, LabelVolume)],
    ids: &[String],
    window: HuWindow,
) -> Result<Vec<FusionPatient>> {
    let mut out = Vec::new();
    for (ct, lv) in subset(volumes, ids) {
        // Any organ id works here; only the normalized images are kept.
        let slices = extract_slices(ct, lv, OrganId::RightLung, window)?;
        out.push(FusionPatient {
            patient_id: ct.patient_id.clone(),
            images: slices.into_iter().map(|s| s.image).collect(),
            labels: lv.labels.clone(),
        });
    }
    Ok(out)
}

fn fuse_group(candidates: &[MemberCandidate], patients: &[FusionPatient]) -> Result<EnsembleReport> {
    let selection = select_ensemble_members(candidates)?;
    let mut models: MemberModels = BTreeMap::new();
    for (organ, ckpt) in selection {
        let (manifest, params) = load_checkpoint(&ckpt)?;
        let graph = graph_from_manifest(&manifest)?;
        models.insert(organ, (graph, params));
    }
    evaluate_ensemble(&models, patients)
}
