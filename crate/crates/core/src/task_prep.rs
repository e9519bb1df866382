//! Task construction: normalization, time scaling, interpolation masking,
//! extrapolation windows, dataset splits, few-shot subsetting, zero-shot
//! group holdout, and forward-fill imputation.
//!
//! Every randomized operation is a pure function of its inputs and a seed.
//! Normalization statistics are fit on the training split only; normalized
//! training values land in [0, 1] while validation/test values may exceed
//! that range (no clipping).

use crate::data_model::{Sample, VectorRepresentation};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("normalization stats cover {stats} variables but sample `{id}` has {sample}")]
    StatsMismatch { id: String, stats: usize, sample: usize },
    #[error("negative time {t} cannot be normalized")]
    NegativeTime { t: f64 },
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("sample `{id}` has {n} unique timestamp(s); interpolation needs at least 2")]
    TooFewTimestamps { id: String, n: usize },
    #[error("sample `{id}`: no observations {side} the cut t={t_cut}")]
    EmptyCutSide { id: String, side: &'static str, t_cut: f64 },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("split produced an empty {0} partition")]
    EmptySplit(&'static str),
    #[error("few-shot subset needs a non-empty training set")]
    EmptyTrain,
    #[error("attribute `{attr}` missing on sample `{id}`")]
    MissingAttribute { attr: String, id: String },
    #[error("zero-shot holdout needs at least one held-out value")]
    EmptyHoldout,
    #[error("zero-shot split produced an empty {0} side")]
    EmptyGroup(&'static str),
    #[error("group-holdout split requires a group attribute and held-out values")]
    MissingGroupSpec,
}

/// Per-variable min/max fit on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// (min, max) per variable, in raw value units.
    pub per_var: Vec<(f64, f64)>,
}

impl NormStats {
    pub fn n_vars(&self) -> usize {
        self.per_var.len()
    }
}

/// Fits min-max statistics from training samples only. Variables never
/// observed in the training split get (0, 0) and normalize to 0.
pub fn fit_norm(train: &[Sample]) -> NormStats {
    let n_vars = train.iter().map(|s| s.n_vars).max().unwrap_or(0);
    let mut per_var = vec![(f64::INFINITY, f64::NEG_INFINITY); n_vars];
    for s in train {
        for o in &s.observations {
            let (lo, hi) = &mut per_var[o.var];
            *lo = lo.min(o.val);
            *hi = hi.max(o.val);
        }
    }
    for entry in &mut per_var {
        if entry.0 > entry.1 {
            *entry = (0.0, 0.0);
        }
    }
    NormStats { per_var }
}

fn norm_value(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Min-max normalizes every observation value; constant variables map to 0.
pub fn apply_norm(samples: &[Sample], stats: &NormStats) -> Result<Vec<Sample>, PrepError> {
    samples
        .iter()
        .map(|s| {
            if s.n_vars > stats.n_vars() {
                return Err(PrepError::StatsMismatch {
                    id: s.id.clone(),
                    stats: stats.n_vars(),
                    sample: s.n_vars,
                });
            }
            let mut out = s.clone();
            for o in &mut out.observations {
                o.val = norm_value(o.val, stats.per_var[o.var]);
            }
            Ok(out)
        })
        .collect()
}

/// Maps normalized values of one variable back to raw units. Where the
/// variable was constant (max == min) the inverse returns that constant.
pub fn invert_norm(values: &[f64], stats: &NormStats, var: usize) -> Vec<f64> {
    let (lo, hi) = stats.per_var[var];
    values
        .iter()
        .map(|&v| if hi > lo { v * (hi - lo) + lo } else { lo })
        .collect()
}

/// Scales a raw time by the window horizon; observed windows map into [0, 1]
/// and times beyond the window exceed 1.
pub fn normalize_time(t: f64, horizon: f64) -> Result<f64, PrepError> {
    if !(horizon > 0.0) {
        return Err(PrepError::BadHorizon(horizon));
    }
    if t < 0.0 {
        return Err(PrepError::NegativeTime { t });
    }
    Ok(t / horizon)
}

/// Rescales every observation time of each sample by the horizon.
pub fn normalize_sample_times(samples: &[Sample], horizon: f64) -> Result<Vec<Sample>, PrepError> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for o in &mut out.observations {
                o.t = normalize_time(o.t, horizon)?;
            }
            Ok(out)
        })
        .collect()
}

/// One value to predict: time, variable, and the ground-truth target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionQuery {
    pub t: f64,
    pub var: usize,
    pub target: f64,
}

/// Queries of one sample plus per-variable counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<PredictionQuery>,
    /// queries-per-variable counts; sums to `queries.len()`.
    pub q_n: Vec<usize>,
}

impl QuerySet {
    pub fn new(queries: Vec<PredictionQuery>, n_vars: usize) -> Self {
        let mut q_n = vec![0usize; n_vars];
        for q in &queries {
            q_n[q.var] += 1;
        }
        Self { queries, q_n }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Masks whole timestamps: floor(mask_fraction * L) of the unique timestamps
/// (at least 1, at most L-1) are removed; every observation at a masked time
/// becomes a query and the rest form the input sample.
pub fn make_interpolation_task(
    sample: &Sample,
    mask_fraction: f64,
    seed: u64,
) -> Result<(Sample, QuerySet), PrepError> {
    let times = sample.unique_times();
    if times.len() < 2 {
        return Err(PrepError::TooFewTimestamps {
            id: sample.id.clone(),
            n: times.len(),
        });
    }
    let n_mask = ((mask_fraction * times.len() as f64).floor() as usize)
        .max(1)
        .min(times.len() - 1);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.shuffle(&mut rng);
    let mut masked: Vec<f64> = idx[..n_mask].iter().map(|&i| times[i]).collect();
    masked.sort_by(f64::total_cmp);

    let is_masked = |t: f64| masked.binary_search_by(|m| m.total_cmp(&t)).is_ok();
    let mut input_obs = Vec::new();
    let mut queries = Vec::new();
    for o in &sample.observations {
        if is_masked(o.t) {
            queries.push(PredictionQuery {
                t: o.t,
                var: o.var,
                target: o.val,
            });
        } else {
            input_obs.push(*o);
        }
    }
    let input = Sample::new(
        sample.id.clone(),
        sample.n_vars,
        input_obs,
        sample.label,
        sample.attrs.clone(),
    )
    .expect("masking keeps at least one timestamp");
    Ok((input, QuerySet::new(queries, sample.n_vars)))
}

/// Splits observations at `t_cut = obs_fraction` (times are expected in
/// window-normalized units, so the nominal window spans [0, 1]): earlier
/// observations form the input, later ones become queries.
pub fn make_extrapolation_task(
    sample: &Sample,
    obs_fraction: f64,
) -> Result<(Sample, QuerySet), PrepError> {
    let t_cut = obs_fraction;
    let mut input_obs = Vec::new();
    let mut queries = Vec::new();
    for o in &sample.observations {
        if o.t < t_cut {
            input_obs.push(*o);
        } else {
            queries.push(PredictionQuery {
                t: o.t,
                var: o.var,
                target: o.val,
            });
        }
    }
    if input_obs.is_empty() {
        return Err(PrepError::EmptyCutSide {
            id: sample.id.clone(),
            side: "before",
            t_cut,
        });
    }
    if queries.is_empty() {
        return Err(PrepError::EmptyCutSide {
            id: sample.id.clone(),
            side: "at or after",
            t_cut,
        });
    }
    let input = Sample::new(
        sample.id.clone(),
        sample.n_vars,
        input_obs,
        sample.label,
        sample.attrs.clone(),
    )
    .expect("input side verified non-empty");
    Ok((input, QuerySet::new(queries, sample.n_vars)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitMode {
    Random,
    /// Hold out samples whose attribute takes one of the listed values as
    /// the test set; the rest are split into train/val by the ratios.
    GroupHoldout {
        attribute: String,
        held_out: Vec<String>,
    },
}

/// Ratio-based dataset split recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// (train, val, test) ratios; must be positive and sum to 1.
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitSpec {
    pub fn random(ratios: (f64, f64, f64), seed: u64) -> Self {
        Self {
            ratios,
            seed,
            mode: SplitMode::Random,
        }
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        let (a, b, c) = self.ratios;
        let positive = a > 0.0 && b > 0.0 && c > 0.0;
        if !positive || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(PrepError::BadRatios(self.ratios));
        }
        Ok(())
    }
}

/// Index partition (train, val, test) for `n` samples: a seeded shuffle,
/// then test = floor(r_test * n), val = floor(r_val * n), train = the rest.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), PrepError> {
    spec.validate()?;
    let (_, r_val, r_test) = spec.ratios;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let n_test = (r_test * n as f64).floor() as usize;
    let n_val = (r_val * n as f64).floor() as usize;
    if n_test == 0 {
        return Err(PrepError::EmptySplit("test"));
    }
    if n_val == 0 {
        return Err(PrepError::EmptySplit("val"));
    }
    if n_test + n_val >= n {
        return Err(PrepError::EmptySplit("train"));
    }
    let test = idx[..n_test].to_vec();
    let val = idx[n_test..n_test + n_val].to_vec();
    let train = idx[n_test + n_val..].to_vec();
    Ok((train, val, test))
}

/// Splits samples into disjoint, exhaustive (train, val, test) sets.
pub fn split_dataset(
    samples: &[Sample],
    spec: &SplitSpec,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>), PrepError> {
    match &spec.mode {
        SplitMode::Random => {
            let (train, val, test) = split_indices(samples.len(), spec)?;
            let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
            Ok((pick(&train), pick(&val), pick(&test)))
        }
        SplitMode::GroupHoldout { attribute, held_out } => {
            let (rest, test) = zero_shot_split(samples, attribute, held_out)?;
            // Carve validation out of the remaining groups with the
            // train:val ratio renormalized.
            let (r_train, r_val, _) = spec.ratios;
            let val_share = r_val / (r_train + r_val);
            let mut idx: Vec<usize> = (0..rest.len()).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
            idx.shuffle(&mut rng);
            let n_val = ((val_share * rest.len() as f64).floor() as usize).max(1);
            if n_val >= rest.len() {
                return Err(PrepError::EmptySplit("train"));
            }
            let val = idx[..n_val].iter().map(|&i| rest[i].clone()).collect();
            let train = idx[n_val..].iter().map(|&i| rest[i].clone()).collect();
            Ok((train, val, test))
        }
    }
}

/// Indices of a uniformly chosen subset of floor(fraction * n) training
/// samples (at least 1), deterministic under the seed.
pub fn few_shot_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, PrepError> {
    if n == 0 {
        return Err(PrepError::EmptyTrain);
    }
    let k = ((fraction * n as f64).floor() as usize).max(1).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Uniform few-shot subset of the training set.
pub fn few_shot_subset(train: &[Sample], fraction: f64, seed: u64) -> Result<Vec<Sample>, PrepError> {
    let keep = few_shot_indices(train.len(), fraction, seed)?;
    Ok(keep.into_iter().map(|i| train[i].clone()).collect())
}

/// Partitions samples by a categorical attribute: samples whose attribute
/// value is held out form the test side, the rest the train side.
pub fn zero_shot_split(
    samples: &[Sample],
    attribute: &str,
    held_out: &[String],
) -> Result<(Vec<Sample>, Vec<Sample>), PrepError> {
    if held_out.is_empty() {
        return Err(PrepError::EmptyHoldout);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        let value = s.attrs.get(attribute).ok_or_else(|| PrepError::MissingAttribute {
            attr: attribute.to_string(),
            id: s.id.clone(),
        })?;
        if held_out.iter().any(|h| h == value) {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    if train.is_empty() {
        return Err(PrepError::EmptyGroup("train"));
    }
    if test.is_empty() {
        return Err(PrepError::EmptyGroup("test"));
    }
    Ok((train, test))
}

/// Forward-fills each column of the grid: unobserved cells take the most
/// recent earlier observed value of that variable; leading gaps become 0.
/// The mask is unchanged.
pub fn forward_fill(vec: &VectorRepresentation) -> VectorRepresentation {
    let mut out = vec.clone();
    for var in 0..vec.n_vars() {
        let mut last = 0.0;
        for row in 0..vec.n_times() {
            if vec.mask[[row, var]] {
                last = vec.values[[row, var]];
            } else {
                out.values[[row, var]] = last;
            }
        }
    }
    out
}

/// Re-derives a seed for a keyed sub-task (per-sample masks, per-epoch
/// shuffles) from a base seed; a split FNV-1a over the key bytes.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.rotate_left(17);
    for b in key.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
