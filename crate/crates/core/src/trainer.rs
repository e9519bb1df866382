//! Training and evaluation harness: Adam over the trainable parameters with
//! the freeze policy enforced, early stopping on validation loss for
//! prediction tasks, fixed-epoch training with best-validation-AUROC
//! checkpoint selection for classification, plus the ablation suite, the
//! layer/composition sweeps, and cost reporting.
//!
//! Determinism: batch order, per-sample interpolation masks, and parameter
//! init all derive from the experiment seed; gradient and metric reductions
//! run in fixed sample order (samples may be processed in parallel, but
//! results are folded in index order).

use crate::archive::{NamedTensorArchive, TensorEntry};
use crate::data_model::Sample;
use crate::dataset_io::DatasetManifest;
use crate::heads::loss_prediction;
use crate::metrics::{auprc, auroc, classification_report, mse_mae, MetricError, ScoredLabels};
use crate::model::{Model, ModelConfig, ModelError, Task};
use crate::params::{Adam, GradAccumulator, ParamError, Session};
use crate::pipelines::{AblationFlags, Composition};
use crate::task_prep::{
    apply_norm, derive_seed, few_shot_subset, fit_norm, make_extrapolation_task,
    make_interpolation_task, normalize_sample_times, split_dataset, split_indices, NormStats,
    PrepError, QuerySet, SplitMode, SplitSpec,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("frozen parameters drifted at epoch {epoch}")]
    FrozenDrift { epoch: usize },
    #[error("no usable samples in the {0} split")]
    NoUsableSamples(&'static str),
    #[error("bad experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
}

/// How the best epoch is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionRule {
    MaxValAuroc,
    MinValLoss,
}

/// Full experiment recipe. Everything a run depends on lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub split: SplitSpec,
    /// Fraction of unique timestamps masked for interpolation tasks.
    pub mask_fraction: f64,
    /// Fraction of the window observed before the extrapolation cut.
    pub obs_fraction: f64,
    /// Train on this fraction of the training split when set.
    pub few_shot: Option<f64>,
}

impl ExperimentConfig {
    /// Task-dependent defaults: learning rate 1e-3 and exactly 20 epochs for
    /// classification; 5e-4 with patience-10 early stopping otherwise.
    pub fn defaults(model: ModelConfig, seed: u64) -> Self {
        let task = model.task;
        Self {
            model,
            learning_rate: if task == Task::Classification { 1e-3 } else { 5e-4 },
            batch_size: 32,
            max_epochs: if task == Task::Classification { 20 } else { 200 },
            patience: 10,
            seed,
            split: SplitSpec::random(
                if task == Task::Classification {
                    (0.8, 0.1, 0.1)
                } else {
                    (0.6, 0.2, 0.2)
                },
                seed,
            ),
            mask_fraction: 0.3,
            obs_fraction: 0.5,
            few_shot: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch size and max epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn selection_rule(&self) -> SelectionRule {
        if self.model.task == Task::Classification {
            SelectionRule::MaxValAuroc
        } else {
            SelectionRule::MinValLoss
        }
    }
}

/// One sample ready for its task.
#[derive(Debug, Clone)]
pub enum PreparedSample {
    Labeled(Sample),
    Queried { input: Sample, queries: QuerySet },
}

/// Splits prepared for one experiment.
pub struct PreparedData {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub norm: NormStats,
    /// Index partition for random-mode splits (for shared-split audits).
    pub split_indices: Option<(Vec<usize>, Vec<usize>, Vec<usize>)>,
    /// Samples dropped per split because the task could not be formed.
    pub skipped: (usize, usize, usize),
}

fn prepare_split(
    task: Task,
    samples: &[Sample],
    mask_fraction: f64,
    obs_fraction: f64,
    seed: u64,
) -> (Vec<PreparedSample>, usize) {
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = 0usize;
    for s in samples {
        match task {
            Task::Classification => {
                if s.label.is_some() {
                    out.push(PreparedSample::Labeled(s.clone()));
                } else {
                    skipped += 1;
                }
            }
            Task::Interpolation => {
                match make_interpolation_task(s, mask_fraction, derive_seed(seed, &format!("mask:{}", s.id))) {
                    Ok((input, queries)) => out.push(PreparedSample::Queried { input, queries }),
                    Err(_) => skipped += 1,
                }
            }
            Task::Extrapolation => match make_extrapolation_task(s, obs_fraction) {
                Ok((input, queries)) => out.push(PreparedSample::Queried { input, queries }),
                Err(_) => skipped += 1,
            },
        }
    }
    (out, skipped)
}

/// Splits, normalizes (statistics from the training split only), rescales
/// times by the manifest horizon, and builds per-sample task inputs.
pub fn prepare_data(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    samples: &[Sample],
) -> Result<PreparedData, TrainError> {
    let (train_raw, val_raw, test_raw) = split_dataset(samples, &config.split)?;
    let split_idx = match config.split.mode {
        SplitMode::Random => Some(split_indices(samples.len(), &config.split)?),
        SplitMode::GroupHoldout { .. } => None,
    };
    let train_raw = match config.few_shot {
        Some(fraction) => few_shot_subset(&train_raw, fraction, derive_seed(config.seed, "fewshot"))?,
        None => train_raw,
    };

    let norm = fit_norm(&train_raw);
    let normalize = |set: &[Sample]| -> Result<Vec<Sample>, PrepError> {
        normalize_sample_times(&apply_norm(set, &norm)?, manifest.horizon)
    };
    let (train_n, val_n, test_n) = (normalize(&train_raw)?, normalize(&val_raw)?, normalize(&test_raw)?);

    let task = config.model.task;
    let (train, sk_train) = prepare_split(task, &train_n, config.mask_fraction, config.obs_fraction, config.seed);
    let (val, sk_val) = prepare_split(task, &val_n, config.mask_fraction, config.obs_fraction, config.seed);
    let (test, sk_test) = prepare_split(task, &test_n, config.mask_fraction, config.obs_fraction, config.seed);
    if train.is_empty() {
        return Err(TrainError::NoUsableSamples("train"));
    }
    if val.is_empty() {
        return Err(TrainError::NoUsableSamples("val"));
    }
    if test.is_empty() {
        return Err(TrainError::NoUsableSamples("test"));
    }
    Ok(PreparedData {
        train,
        val,
        test,
        norm,
        split_indices: split_idx,
        skipped: (sk_train, sk_val, sk_test),
    })
}

fn sample_loss_and_grads(
    model: &Model,
    prepared: &PreparedSample,
) -> Result<(f64, BTreeMap<String, Array2<f64>>), ModelError> {
    let sess = Session::new(&model.store);
    let loss = match prepared {
        PreparedSample::Labeled(s) => model.classification_loss(&sess, s)?,
        PreparedSample::Queried { input, queries } => model.prediction_loss(&sess, input, queries)?,
    };
    let value = sess.tape.value(loss)[[0, 0]];
    Ok((value, sess.grads(loss)))
}

fn sample_loss_only(model: &Model, prepared: &PreparedSample) -> Result<f64, ModelError> {
    let sess = Session::new(&model.store);
    let loss = match prepared {
        PreparedSample::Labeled(s) => model.classification_loss(&sess, s)?,
        PreparedSample::Queried { input, queries } => model.prediction_loss(&sess, input, queries)?,
    };
    Ok(sess.tape.value(loss)[[0, 0]])
}

/// Mean objective over a set of prepared samples (no parameter updates).
pub fn mean_loss(model: &Model, set: &[PreparedSample]) -> Result<f64, ModelError> {
    let losses: Result<Vec<f64>, ModelError> =
        set.par_iter().map(|p| sample_loss_only(model, p)).collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Strict-improvement early stopping: fires once the validation loss has
/// not improved for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's validation loss; true means stop now.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

/// First-best epoch (1-based) under the selection rule.
pub fn select_best_epoch(rule: SelectionRule, values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        let better = match rule {
            SelectionRule::MaxValAuroc => v > values[best],
            SelectionRule::MinValLoss => v < values[best],
        };
        if better {
            best = i;
        }
    }
    best + 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation AUROC (or accuracy for multiclass) for classification;
    /// the validation objective for prediction tasks.
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub skipped: (usize, usize, usize),
}

/// The selected trainable parameters plus bookkeeping. Frozen parameters
/// are reconstructed from the config seed (or archives), never stored.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub metric: f64,
    pub rule: SelectionRule,
    pub snapshot: BTreeMap<String, Array2<f64>>,
}

impl CheckpointRecord {
    /// Serializes the trainable tensors plus metadata as an archive.
    pub fn to_archive(&self, config_hash: &str) -> NamedTensorArchive {
        let mut archive = NamedTensorArchive::new();
        for (name, value) in &self.snapshot {
            let flat: Vec<f64> = value.iter().copied().collect();
            archive.insert(name, TensorEntry::from_f64s(vec![value.nrows(), value.ncols()], &flat));
        }
        archive.metadata.insert("epoch".into(), self.epoch.to_string());
        archive.metadata.insert("metric".into(), format!("{:?}", self.metric));
        archive.metadata.insert(
            "rule".into(),
            match self.rule {
                SelectionRule::MaxValAuroc => "max-auroc".into(),
                SelectionRule::MinValLoss => "min-val-loss".into(),
            },
        );
        archive.metadata.insert("config_hash".into(), config_hash.to_string());
        archive
    }

    /// Reads trainable tensors back out of a checkpoint archive.
    pub fn snapshot_from_archive(archive: &NamedTensorArchive) -> BTreeMap<String, Array2<f64>> {
        archive
            .tensors
            .iter()
            .map(|(name, entry)| {
                let rows = entry.shape[0];
                let cols = entry.shape[1];
                (
                    name.clone(),
                    Array2::from_shape_vec((rows, cols), entry.to_f64s()).unwrap(),
                )
            })
            .collect()
    }
}

/// Validation metric used for classification checkpoint selection: AUROC
/// for binary labels (accuracy when AUROC is undefined or multiclass).
fn classification_val_metric(model: &Model, set: &[PreparedSample]) -> Result<f64, TrainError> {
    let report = evaluate_classification(model, set)?;
    if let Some(v) = report.map.get("auroc") {
        return Ok(*v);
    }
    Ok(report.map["accuracy"])
}

/// Trains under the experiment config: Adam on trainable parameters only,
/// fixed-epoch + max-AUROC selection for classification, patience-based
/// early stopping + min-loss selection for prediction tasks.
pub fn train(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(Model, CheckpointRecord, TrainHistory), TrainError> {
    config.validate()?;
    let mut model = Model::build(&config.model)?;
    let (record, history) = train_loop(config, data, &mut model)?;
    Ok((model, record, history))
}

/// The epoch loop over an already-built model (tests train surgically
/// modified models through this entry point).
pub fn train_loop(
    config: &ExperimentConfig,
    data: &PreparedData,
    model: &mut Model,
) -> Result<(CheckpointRecord, TrainHistory), TrainError> {
    let rule = config.selection_rule();
    let mut opt = Adam::new(config.learning_rate);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut history = TrainHistory {
        skipped: data.skipped,
        ..Default::default()
    };
    let frozen_hash = model.store.frozen_hash();
    let mut best_value = match rule {
        SelectionRule::MaxValAuroc => f64::NEG_INFINITY,
        SelectionRule::MinValLoss => f64::INFINITY,
    };
    let mut best: Option<CheckpointRecord> = None;

    let n_train = data.train.len();
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, &format!("epoch{epoch}")));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Result<Vec<_>, ModelError> = batch
                .par_iter()
                .map(|&i| sample_loss_and_grads(model, &data.train[i]))
                .collect();
            let mut acc = GradAccumulator::new();
            for (loss, grads) in results? {
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                epoch_loss += loss;
                acc.add(grads);
            }
            let grads = acc.mean();
            opt.step(&mut model.store, &grads)?;
        }
        let train_loss = epoch_loss / n_train as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        if model.store.frozen_hash() != frozen_hash {
            return Err(TrainError::FrozenDrift { epoch });
        }

        let val_loss = mean_loss(model, &data.val)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let val_metric = match rule {
            SelectionRule::MaxValAuroc => classification_val_metric(model, &data.val)?,
            SelectionRule::MinValLoss => val_loss,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metric,
        });

        let improved = match rule {
            SelectionRule::MaxValAuroc => val_metric > best_value,
            SelectionRule::MinValLoss => val_metric < best_value,
        };
        if improved {
            best_value = val_metric;
            best = Some(CheckpointRecord {
                epoch,
                metric: val_metric,
                rule,
                snapshot: model.store.trainable_snapshot(),
            });
        }
        if rule == SelectionRule::MinValLoss && stopper.observe(val_loss) {
            break;
        }
    }

    let record = best.expect("at least one epoch ran");
    history.selected_epoch = record.epoch;
    model.store.restore_snapshot(&record.snapshot)?;
    Ok((record, history))
}

/// Flat map of metric name to value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: BTreeMap<String, f64>,
}

fn evaluate_classification(model: &Model, set: &[PreparedSample]) -> Result<MetricReport, TrainError> {
    let n_classes = model.config.n_classes.unwrap_or(2);
    let outputs: Result<Vec<(Vec<f64>, usize)>, ModelError> = set
        .par_iter()
        .map(|p| match p {
            PreparedSample::Labeled(s) => Ok((model.classify_probs(s)?, s.label.unwrap())),
            _ => unreachable!("classification evaluation over labeled samples"),
        })
        .collect();
    let outputs = outputs?;
    let predicted: Vec<usize> = outputs
        .iter()
        .map(|(p, _)| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect();
    let labels: Vec<usize> = outputs.iter().map(|(_, l)| *l).collect();
    let report = classification_report(&predicted, &labels, n_classes)?;
    let mut map = BTreeMap::new();
    map.insert("accuracy".into(), report.accuracy);
    map.insert("precision".into(), report.precision);
    map.insert("recall".into(), report.recall);
    map.insert("f1".into(), report.f1);
    if n_classes == 2 {
        let scores: Vec<f64> = outputs.iter().map(|(p, _)| p[1]).collect();
        let bin_labels: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        if let Ok(scored) = ScoredLabels::new(scores, bin_labels) {
            if let Ok(v) = auroc(&scored) {
                map.insert("auroc".into(), v);
            }
            if let Ok(v) = auprc(&scored) {
                map.insert("auprc".into(), v);
            }
        }
    }
    Ok(MetricReport { map })
}

fn evaluate_prediction(model: &Model, set: &[PreparedSample]) -> Result<MetricReport, TrainError> {
    let outputs: Result<Vec<(Vec<f64>, Vec<f64>, Vec<Vec<(f64, f64)>>)>, ModelError> = set
        .par_iter()
        .map(|p| match p {
            PreparedSample::Queried { input, queries } => {
                let preds = model.predict(input, queries)?;
                let targets: Vec<f64> = queries.queries.iter().map(|q| q.target).collect();
                let mut per_var = vec![Vec::new(); model.config.n_vars];
                for (pred, q) in preds.iter().zip(&queries.queries) {
                    per_var[q.var].push((*pred, q.target));
                }
                Ok((preds, targets, per_var))
            }
            _ => unreachable!("prediction evaluation over queried samples"),
        })
        .collect();
    let outputs = outputs?;
    let mut all_preds = Vec::new();
    let mut all_targets = Vec::new();
    let mut loss_sum = 0.0;
    for (preds, targets, per_var) in &outputs {
        all_preds.extend_from_slice(preds);
        all_targets.extend_from_slice(targets);
        loss_sum += loss_prediction(per_var);
    }
    let (mse, mae) = mse_mae(&all_preds, &all_targets)?;
    let mut map = BTreeMap::new();
    map.insert("mse".into(), mse);
    map.insert("mae".into(), mae);
    map.insert("loss".into(), loss_sum / outputs.len().max(1) as f64);
    Ok(MetricReport { map })
}

/// Task-appropriate metrics over a prepared evaluation split.
pub fn evaluate(model: &Model, set: &[PreparedSample]) -> Result<MetricReport, TrainError> {
    if set.is_empty() {
        return Err(TrainError::NoUsableSamples("evaluation"));
    }
    match model.config.task {
        Task::Classification => evaluate_classification(model, set),
        Task::Interpolation | Task::Extrapolation => evaluate_prediction(model, set),
    }
}

/// Mean and sample standard deviation per metric across seed runs.
pub fn aggregate_reports(reports: &[MetricReport]) -> BTreeMap<String, (f64, f64)> {
    let mut out = BTreeMap::new();
    if reports.is_empty() {
        return out;
    }
    let keys: Vec<String> = reports[0].map.keys().cloned().collect();
    for key in keys {
        let values: Vec<f64> = reports.iter().filter_map(|r| r.map.get(&key).copied()).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.insert(key, (mean, std));
    }
    out
}

/// One full run: prepare, train, evaluate on the test split.
pub fn run_experiment(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    samples: &[Sample],
) -> Result<(Model, CheckpointRecord, TrainHistory, MetricReport), TrainError> {
    let data = prepare_data(config, manifest, samples)?;
    let (model, record, history) = train(config, &data)?;
    let report = evaluate(&model, &data.test)?;
    Ok((model, record, history, report))
}

/// The six ablation-suite variants in table order.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    vec![
        ("full", AblationFlags::default()),
        ("rp_transformer", AblationFlags { rp_transformer: true, ..Default::default() }),
        ("wo_ta", AblationFlags { no_ta: true, ..Default::default() }),
        ("wo_va", AblationFlags { no_va: true, ..Default::default() }),
        ("wo_te", AblationFlags { no_te: true, ..Default::default() }),
        ("wo_ve", AblationFlags { no_ve: true, ..Default::default() }),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub metrics: MetricReport,
}

/// Runs all six ablation variants on identical splits and seeds.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    manifest: &DatasetManifest,
    samples: &[Sample],
) -> Result<Vec<TableRow>, TrainError> {
    let mut rows = Vec::new();
    for (name, flags) in ablation_variants() {
        let mut config = base.clone();
        config.model.pipeline.ablation = flags;
        let (_, _, _, report) = run_experiment(&config, manifest, samples)?;
        rows.push(TableRow {
            name: name.to_string(),
            metrics: report,
        });
    }
    Ok(rows)
}

/// Sweep axes: layer truncation depth or stage composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepAxis {
    Layers(Vec<usize>),
    Composition,
}

/// One run per axis value, shared seed and split.
pub fn run_sweeps(
    base: &ExperimentConfig,
    manifest: &DatasetManifest,
    samples: &[Sample],
    axis: &SweepAxis,
) -> Result<Vec<TableRow>, TrainError> {
    let mut rows = Vec::new();
    match axis {
        SweepAxis::Layers(ks) => {
            for &k in ks {
                let mut config = base.clone();
                config.model.layers = k;
                let (_, _, _, report) = run_experiment(&config, manifest, samples)?;
                rows.push(TableRow {
                    name: format!("layers={k}"),
                    metrics: report,
                });
            }
        }
        SweepAxis::Composition => {
            for comp in [Composition::Cb, Composition::Cc, Composition::Bb, Composition::Bc] {
                let mut config = base.clone();
                config.model.pipeline.composition = comp;
                let (_, _, _, report) = run_experiment(&config, manifest, samples)?;
                rows.push(TableRow {
                    name: comp.as_str().to_string(),
                    metrics: report,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub trainable_parameters: usize,
    pub seconds_per_training_step: f64,
    pub seconds_per_inference_sample: f64,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trainable parameter count plus wall-clock medians over at least 20
/// training steps and 20 single-sample inference passes.
pub fn report_cost(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<CostReport, TrainError> {
    const STEPS: usize = 21;
    let mut model = Model::build(&config.model)?;
    let mut opt = Adam::new(config.learning_rate);
    let batch: Vec<&PreparedSample> = data
        .train
        .iter()
        .cycle()
        .take(config.batch_size.min(data.train.len()))
        .collect();
    let mut step_times = Vec::with_capacity(STEPS);
    for _ in 0..STEPS {
        let start = Instant::now();
        let results: Result<Vec<_>, ModelError> = batch
            .par_iter()
            .map(|p| sample_loss_and_grads(&model, p))
            .collect();
        let mut acc = GradAccumulator::new();
        for (_, grads) in results? {
            acc.add(grads);
        }
        opt.step(&mut model.store, &acc.mean())?;
        step_times.push(start.elapsed().as_secs_f64());
    }
    let mut infer_times = Vec::with_capacity(STEPS);
    for p in data.test.iter().cycle().take(STEPS) {
        let start = Instant::now();
        match p {
            PreparedSample::Labeled(s) => {
                model.classify_probs(s)?;
            }
            PreparedSample::Queried { input, queries } => {
                model.predict(input, queries)?;
            }
        }
        infer_times.push(start.elapsed().as_secs_f64());
    }
    Ok(CostReport {
        trainable_parameters: model.trainable_value_count(),
        seconds_per_training_step: median(step_times),
        seconds_per_inference_sample: median(infer_times),
    })
}
