//! Experiment configs, persisted records, and the resumable runner that
//! walks every (split, trial) cell of the hold-out protocol.

use std::fs;
use std::path::{Path, PathBuf};

use heldout_core::data::{
    make_holdout_splits, synth_shapes, HoldOutSplit, LabeledDataset, ShapeKind,
};
use heldout_core::metrics::{aggregate_trials, average_precision};
use heldout_core::model::{
    build_model, default_lr_schedule, train, AuxTask, CnnConfig, CpcTrainSettings,
    MultiHeadModel, PatchGrid, TrainConfig,
};
use heldout_core::rng::SeedTree;
use heldout_core::score::{
    edge_energy_score, fit_pixel_gmm, gmm_score, msp_score, odin_score, score_test_set,
    EdgePolarity, OdinConfig, ScoredExample,
};
use heldout_core::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::loaders;
use crate::report;

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_shape_classes")]
    pub classes: Vec<String>,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_shape_classes() -> Vec<String> {
    ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

fn default_image_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSpec {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSpec {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    #[serde(rename = "synth")]
    Synth(SynthSpec),
    #[serde(rename = "cifar")]
    Cifar(CifarSpec),
    #[serde(rename = "idx")]
    Idx(IdxSpec),
    #[serde(rename = "raw")]
    Raw(RawSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_cpc_steps")]
    pub cpc_steps: usize,
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 32]
}

fn default_cpc_steps() -> usize {
    1
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            widths: default_widths(),
            cpc_steps: default_cpc_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpcSpec {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    #[serde(default = "default_cpc_steps")]
    pub n_pred_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// `(epoch, factor)` pairs; the rate is multiplied by `factor` at the
    /// start of `epoch`. Absent means the default two-step decay.
    #[serde(default)]
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_aux_task")]
    pub aux_task: String,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub mask_augment: bool,
    #[serde(default)]
    pub crop_flip_pad: Option<usize>,
    #[serde(default)]
    pub cpc: Option<CpcSpec>,
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_aux_task() -> String {
    "none".to_string()
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            lr_schedule: None,
            momentum: default_momentum(),
            nesterov: true,
            weight_decay: default_weight_decay(),
            aux_task: default_aux_task(),
            lambda: 0.0,
            mask_augment: false,
            crop_flip_pad: None,
            cpc: None,
        }
    }
}

impl TrainSpec {
    pub fn aux_task(&self) -> Result<AuxTask> {
        self.aux_task
            .parse()
            .map_err(|_| CliError::Config(format!("unknown aux task {:?}", self.aux_task)))
    }

    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_schedule: self
                .lr_schedule
                .clone()
                .unwrap_or_else(|| default_lr_schedule(self.epochs)),
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            aux_task: self.aux_task()?,
            mask_augment: self.mask_augment,
            crop_flip_pad: self.crop_flip_pad,
            cpc: self.cpc.as_ref().map(|c| CpcTrainSettings {
                grid: PatchGrid {
                    rows: c.rows,
                    cols: c.cols,
                    patch: c.patch,
                    stride: c.stride,
                },
                n_pred_steps: c.n_pred_steps,
            }),
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdinSpec {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_temperature() -> f64 {
    1000.0
}
fn default_epsilon() -> f64 {
    5e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    #[serde(default = "default_polarity")]
    pub polarity: String,
}

fn default_polarity() -> String {
    "high_is_anomalous".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScorerSpec {
    #[serde(rename = "msp")]
    Msp,
    #[serde(rename = "odin")]
    Odin(OdinSpec),
    #[serde(rename = "pixel_gmm")]
    PixelGmm,
    #[serde(rename = "edge_energy")]
    EdgeEnergy(EdgeSpec),
}

impl ScorerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ScorerSpec::Msp => "msp",
            ScorerSpec::Odin(_) => "odin",
            ScorerSpec::PixelGmm => "pixel_gmm",
            ScorerSpec::EdgeEnergy(_) => "edge_energy",
        }
    }

    /// Whether this scorer reads a trained classifier (as opposed to a
    /// baseline fit on raw pixels).
    pub fn needs_model(&self) -> bool {
        matches!(self, ScorerSpec::Msp | ScorerSpec::Odin(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    pub scorers: Vec<ScorerSpec>,
    #[serde(default = "default_trials")]
    pub trials_per_split: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    3
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials_per_split == 0 {
            return Err(CliError::Config("trials_per_split must be at least 1".into()));
        }
        if self.scorers.is_empty() {
            return Err(CliError::Config("at least one scorer is required".into()));
        }
        for (i, a) in self.scorers.iter().enumerate() {
            for b in &self.scorers[i + 1..] {
                if a.name() == b.name() {
                    return Err(CliError::Config(format!(
                        "duplicate scorer {:?}; each scorer may appear once",
                        a.name()
                    )));
                }
            }
        }
        if self.model.widths.is_empty() {
            return Err(CliError::Config("model.widths must not be empty".into()));
        }
        let aux = self.train.aux_task()?;
        if aux == AuxTask::Cpc && self.train.cpc.is_none() {
            return Err(CliError::Config(
                "aux task \"cpc\" requires train.cpc patch settings".into(),
            ));
        }
        if !(self.train.lambda.is_finite() && self.train.lambda >= 0.0) {
            return Err(CliError::Config("lambda must be finite and >= 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::Config("batch_size must be at least 1".into()));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return Err(CliError::Config("learning_rate must be positive".into()));
        }
        for s in &self.scorers {
            match s {
                ScorerSpec::Odin(o) => {
                    let cfg = OdinConfig {
                        temperature: o.temperature,
                        epsilon: o.epsilon,
                    };
                    cfg.validate().map_err(CliError::from)?;
                }
                ScorerSpec::EdgeEnergy(e) => {
                    e.polarity
                        .parse::<EdgePolarity>()
                        .map_err(CliError::from)?;
                }
                _ => {}
            }
        }
        if let DatasetSpec::Synth(s) = &self.dataset {
            if s.classes.is_empty() {
                return Err(CliError::Config("synth dataset needs class names".into()));
            }
            for c in &s.classes {
                c.parse::<ShapeKind>().map_err(CliError::from)?;
            }
            if s.n_train_per_class == 0 || s.n_test_per_class == 0 {
                return Err(CliError::Config("synth example counts must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Parse and validate a config file. A missing file is a usage error so the
/// process can exit with code 2.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CliError::MissingConfig(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Record
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerAp {
    pub scorer: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialResult {
    /// Classifier accuracy over the normal part of the test set; absent
    /// when the cell trained no model (baseline-only scorer lists).
    pub test_accuracy: Option<f64>,
    pub aps: Vec<ScorerAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialOutcome {
    #[serde(rename = "ok")]
    Ok(TrialResult),
    #[serde(rename = "failed")]
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial: usize,
    /// Seed handed to the training loop for this cell; derived from the
    /// experiment seed, the split index, and the trial index.
    pub train_seed: u64,
    pub outcome: TrialOutcome,
}

impl TrialRecord {
    pub fn result(&self) -> Option<&TrialResult> {
        match &self.outcome {
            TrialOutcome::Ok(r) => Some(r),
            TrialOutcome::Failed { .. } => None,
        }
    }

    pub fn ap_for(&self, scorer: &str) -> Option<f64> {
        self.result()?
            .aps
            .iter()
            .find(|a| a.scorer == scorer)
            .map(|a| a.ap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub held_out_class: usize,
    pub held_out_name: String,
    pub skew: f64,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSummary {
    /// Scorer name, or "accuracy" for the classifier-accuracy summary.
    pub metric: String,
    /// One entry per split, in split order; absent where every trial failed.
    pub per_split: Vec<Option<Aggregate>>,
    /// Unweighted mean of the per-split means.
    pub grand_mean: Option<f64>,
    /// Sample standard deviation of the per-trial grand means, over trials
    /// that completed in every split.
    pub grand_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub splits: Vec<SplitRecord>,
    pub summaries: Vec<MetricSummary>,
}

impl ExperimentRecord {
    pub fn summary(&self, metric: &str) -> Option<&MetricSummary> {
        self.summaries.iter().find(|s| s.metric == metric)
    }

    /// Whether any configured scorer is a raw-pixel baseline (controls the
    /// skew column in reports).
    pub fn has_baseline(&self) -> bool {
        self.config.scorers.iter().any(|s| !s.needs_model())
    }
}

fn summarize(metric: &str, splits: &[SplitRecord], value: impl Fn(&TrialRecord) -> Option<f64>) -> MetricSummary {
    let per_split: Vec<Option<Aggregate>> = splits
        .iter()
        .map(|s| {
            let vals: Vec<f64> = s.trials.iter().filter_map(&value).collect();
            aggregate_trials(&vals).ok().map(|a| Aggregate {
                mean: a.mean,
                std: a.std,
                n: a.n_trials,
            })
        })
        .collect();
    let means: Vec<f64> = per_split.iter().flatten().map(|a| a.mean).collect();
    let grand_mean = (per_split.iter().all(|a| a.is_some()) && !means.is_empty())
        .then(|| means.iter().sum::<f64>() / means.len() as f64);
    let n_trials = splits.iter().map(|s| s.trials.len()).max().unwrap_or(0);
    let mut trial_grands = Vec::new();
    for t in 0..n_trials {
        let vals: Vec<f64> = splits
            .iter()
            .filter_map(|s| s.trials.get(t).and_then(&value))
            .collect();
        if vals.len() == splits.len() {
            trial_grands.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    let grand_std = aggregate_trials(&trial_grands).ok().map(|a| a.std);
    MetricSummary {
        metric: metric.to_string(),
        per_split,
        grand_mean,
        grand_std,
    }
}

pub fn assemble_record(
    config: &ExperimentConfig,
    class_names: &[String],
    splits: Vec<SplitRecord>,
) -> ExperimentRecord {
    let mut summaries = Vec::new();
    for scorer in &config.scorers {
        let name = scorer.name();
        summaries.push(summarize(name, &splits, |t| t.ap_for(name)));
    }
    if config.scorers.iter().any(|s| s.needs_model()) {
        summaries.push(summarize("accuracy", &splits, |t| {
            t.result().and_then(|r| r.test_accuracy)
        }));
    }
    ExperimentRecord {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        class_names: class_names.to_vec(),
        splits,
        summaries,
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RunStats {
    pub computed: usize,
    pub reused: usize,
    pub failed: usize,
}

/// Load the configured dataset pair. Synthetic data draws from the
/// experiment tree's "data" stream so the whole experiment hangs off one
/// seed; file-backed datasets ignore the tree.
pub fn load_datasets(
    cfg: &ExperimentConfig,
    exp: &SeedTree,
) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetSpec::Synth(s) => {
            let kinds: Vec<ShapeKind> = s
                .classes
                .iter()
                .map(|c| c.parse::<ShapeKind>().map_err(CliError::from))
                .collect::<Result<_>>()?;
            let mut rng = exp.child("data").rng();
            let train = synth_shapes(s.n_train_per_class, &kinds, s.image_size, &mut rng)?;
            let test = synth_shapes(s.n_test_per_class, &kinds, s.image_size, &mut rng)?;
            Ok((train, test))
        }
        DatasetSpec::Cifar(c) => {
            let train = loaders::merge_datasets(
                c.train
                    .iter()
                    .map(loaders::load_cifar_binary)
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let test = loaders::merge_datasets(
                c.test
                    .iter()
                    .map(loaders::load_cifar_binary)
                    .collect::<Result<Vec<_>>>()?,
            )?;
            Ok((train, test))
        }
        DatasetSpec::Idx(i) => Ok((
            loaders::load_idx(&i.train_images, &i.train_labels)?,
            loaders::load_idx(&i.test_images, &i.test_labels)?,
        )),
        DatasetSpec::Raw(r) => Ok((
            loaders::load_raw_tensor(&r.train)?,
            loaders::load_raw_tensor(&r.test)?,
        )),
    }
}

/// Fraction of normal test examples the classifier labels correctly.
pub fn model_accuracy(model: &MultiHeadModel, split: &HoldOutSplit) -> Result<f64> {
    let labeled: Vec<(&Tensor, usize)> = split
        .test_examples
        .iter()
        .filter_map(|e| e.label.map(|l| (&e.image, l)))
        .collect();
    if labeled.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for chunk in labeled.chunks(64) {
        let images: Vec<&Tensor> = chunk.iter().map(|(img, _)| *img).collect();
        let x = heldout_core::data::stack_images(&images)?;
        let mut g = Graph::inference();
        let logits = model.class_logits(&mut g, &x)?;
        let data = logits.data();
        for (row, (_, label)) in chunk.iter().enumerate() {
            let start = row * model.n_classes;
            let row_vals = &data[start..start + model.n_classes];
            let best = row_vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if best == *label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / labeled.len() as f64)
}

fn need_model<'a>(
    spec: &ScorerSpec,
    m: Option<&'a MultiHeadModel>,
) -> Result<&'a MultiHeadModel> {
    m.ok_or_else(|| CliError::Config(format!("scorer {:?} needs a model", spec.name())))
}

/// Score every test example of a split with one configured scorer.
pub fn score_split(
    spec: &ScorerSpec,
    model: Option<&MultiHeadModel>,
    split: &HoldOutSplit,
) -> Result<Vec<ScoredExample>> {
    let scored = match spec {
        ScorerSpec::Msp => {
            let m = need_model(spec, model)?;
            score_test_set(|img| msp_score(m, img), split)?
        }
        ScorerSpec::Odin(o) => {
            let m = need_model(spec, model)?;
            let cfg = OdinConfig {
                temperature: o.temperature,
                epsilon: o.epsilon,
            };
            score_test_set(|img| odin_score(m, img, &cfg), split)?
        }
        ScorerSpec::PixelGmm => {
            let gmm = fit_pixel_gmm(split.train.images(), 500, 1e-7)?;
            score_test_set(|img| gmm_score(&gmm, img), split)?
        }
        ScorerSpec::EdgeEnergy(e) => {
            let polarity: EdgePolarity = e.polarity.parse()?;
            score_test_set(|img| edge_energy_score(img, polarity), split)?
        }
    };
    Ok(scored)
}

fn compute_cell(
    cfg: &ExperimentConfig,
    split: &HoldOutSplit,
    cell: &SeedTree,
    scores_dir: &Path,
    k: usize,
    t: usize,
) -> Result<TrialResult> {
    let in_channels = split
        .train
        .image_shape()
        .map(|(c, _, _)| c)
        .ok_or_else(|| CliError::Config("split has an empty training set".into()))?;
    let model = if cfg.scorers.iter().any(|s| s.needs_model()) {
        let arch = CnnConfig {
            in_channels,
            widths: cfg.model.widths.clone(),
            cpc_steps: cfg.model.cpc_steps,
        };
        let fresh = build_model(
            &arch,
            split.train.n_classes(),
            cfg.train.aux_task()?,
            &cell.child("init"),
        )?;
        let tc = cfg.train.to_train_config(cell.child("train").key())?;
        let (trained, _log) = train(fresh, split, &tc)?;
        Some(trained)
    } else {
        None
    };

    let test_accuracy = match &model {
        Some(m) => Some(model_accuracy(m, split)?),
        None => None,
    };
    let mut aps = Vec::new();
    for spec in &cfg.scorers {
        let scored = score_split(spec, model.as_ref(), split)?;
        let csv = report::scores_csv(&scored);
        let path = scores_dir.join(format!("split{k}_trial{t}_{}.csv", spec.name()));
        fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
        aps.push(ScorerAp {
            scorer: spec.name().to_string(),
            ap: average_precision(&scored)?.average_precision,
        });
    }
    Ok(TrialResult { test_accuracy, aps })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("records are plain data");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_cell(path: &Path) -> Option<TrialRecord> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Run (or resume) every cell of the experiment, persist per-cell records,
/// score CSVs, the assembled record, and both report flavors under
/// `out_dir`, and return the record plus what was computed vs reused.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<(ExperimentRecord, RunStats)> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| CliError::io(&cells_dir, e))?;

    let exp = SeedTree::new(cfg.seed);
    let (train_set, test_set) = load_datasets(cfg, &exp)?;
    let splits = make_holdout_splits(&train_set, &test_set, cfg.trials_per_split)?;

    let mut stats = RunStats::default();
    let mut split_records = Vec::with_capacity(splits.len());
    for (k, split) in splits.iter().enumerate() {
        let mut trials = Vec::with_capacity(split.trials);
        for t in 0..split.trials {
            let cell_path = cells_dir.join(format!("split{k}_trial{t}.json"));
            if resume {
                if let Some(prev) = read_cell(&cell_path) {
                    if prev.result().is_some() {
                        stats.reused += 1;
                        trials.push(prev);
                        continue;
                    }
                }
            }
            let cell = exp
                .child("split")
                .child_index(k as u64)
                .child("trial")
                .child_index(t as u64);
            let outcome = match compute_cell(cfg, split, &cell, &cells_dir, k, t) {
                Ok(result) => {
                    stats.computed += 1;
                    TrialOutcome::Ok(result)
                }
                Err(e) => {
                    stats.failed += 1;
                    TrialOutcome::Failed {
                        error: e.to_string(),
                    }
                }
            };
            let record = TrialRecord {
                trial: t,
                train_seed: cell.child("train").key(),
                outcome,
            };
            write_json(&cell_path, &record)?;
            trials.push(record);
        }
        split_records.push(SplitRecord {
            held_out_class: split.held_out_class,
            held_out_name: train_set.class_names()[split.held_out_class].clone(),
            skew: split.skew,
            trials,
        });
    }

    let record = assemble_record(cfg, train_set.class_names(), split_records);
    write_json(&out_dir.join("record.json"), &record)?;
    let cells_csv = report::cells_csv(&record);
    let path = out_dir.join("cells.csv");
    fs::write(&path, cells_csv).map_err(|e| CliError::io(&path, e))?;
    let md = report::emit_report(&record, report::ReportFormat::Markdown);
    let path = out_dir.join("report.md");
    fs::write(&path, md).map_err(|e| CliError::io(&path, e))?;
    let csv = report::emit_report(&record, report::ReportFormat::Csv);
    let path = out_dir.join("report.csv");
    fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    Ok((record, stats))
}
