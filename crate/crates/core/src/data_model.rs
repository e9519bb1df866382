//! Irregularly sampled time series samples and their three interchangeable
//! representations: a flat chronological tuple set, a timestamp-aligned
//! value/mask grid, and per-variable observation sequences.
//!
//! All types are immutable after construction and conversions are pure; no
//! arithmetic is ever performed on timestamps or values, so chained
//! conversions preserve the original observation multiset bit-exactly.

use ndarray::Array2;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("sample `{id}` has no observations")]
    Empty { id: String },
    #[error("sample `{id}`: non-finite timestamp {t}")]
    NonFiniteTime { id: String, t: f64 },
    #[error("sample `{id}`: non-finite value {val} at (t={t}, var={var})")]
    NonFiniteValue { id: String, t: f64, var: usize, val: f64 },
    #[error("sample `{id}`: variable index {var} out of range (n_vars={n_vars})")]
    VarOutOfRange { id: String, var: usize, n_vars: usize },
    #[error("sample `{id}`: duplicate observation at (t={t}, var={var})")]
    DuplicateObservation { id: String, t: f64, var: usize },
    #[error("sample `{id}`: label {label} out of range (n_classes={n_classes})")]
    LabelOutOfRange { id: String, label: usize, n_classes: usize },
}

/// One recorded measurement: time, variable index, value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub var: usize,
    pub val: f64,
}

/// A multivariate irregularly sampled series with optional label and
/// categorical attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub n_vars: usize,
    pub observations: Vec<Observation>,
    pub label: Option<usize>,
    pub attrs: BTreeMap<String, String>,
}

impl Sample {
    /// Validates and constructs a sample. Observations may arrive in any
    /// order; duplicates of the same (t, var) pair are rejected.
    pub fn new(
        id: impl Into<String>,
        n_vars: usize,
        observations: Vec<Observation>,
        label: Option<usize>,
        attrs: BTreeMap<String, String>,
    ) -> Result<Self, ValidationError> {
        let id = id.into();
        if observations.is_empty() {
            return Err(ValidationError::Empty { id });
        }
        for obs in &observations {
            if !obs.t.is_finite() {
                return Err(ValidationError::NonFiniteTime { id, t: obs.t });
            }
            if !obs.val.is_finite() {
                return Err(ValidationError::NonFiniteValue {
                    id,
                    t: obs.t,
                    var: obs.var,
                    val: obs.val,
                });
            }
            if obs.var >= n_vars {
                return Err(ValidationError::VarOutOfRange {
                    id,
                    var: obs.var,
                    n_vars,
                });
            }
        }
        let mut keys: Vec<(f64, usize)> = observations.iter().map(|o| (o.t, o.var)).collect();
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for w in keys.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(ValidationError::DuplicateObservation {
                    id,
                    t: w[0].0,
                    var: w[0].1,
                });
            }
        }
        Ok(Self {
            id,
            n_vars,
            observations,
            label,
            attrs,
        })
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    /// Unique observation timestamps in ascending order.
    pub fn unique_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.observations.iter().map(|o| o.t).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| a == b);
        ts
    }
}

/// Chronologically sorted observation tuples; ties on time break by
/// variable index so the order is total.
#[derive(Debug, Clone, PartialEq)]
pub struct SetRepresentation {
    pub tuples: Vec<Observation>,
}

impl SetRepresentation {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Timestamp-aligned grid form of the same observations.
    pub fn to_vector(&self, n_vars: usize) -> VectorRepresentation {
        let mut times: Vec<f64> = self.tuples.iter().map(|o| o.t).collect();
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| a == b);
        let l = times.len();
        let mut values = Array2::zeros((l, n_vars));
        let mut mask = Array2::from_elem((l, n_vars), false);
        for obs in &self.tuples {
            let row = times.partition_point(|&t| t < obs.t);
            debug_assert!(times[row] == obs.t);
            values[[row, obs.var]] = obs.val;
            mask[[row, obs.var]] = true;
        }
        VectorRepresentation { times, values, mask }
    }
}

/// Unique ascending timestamps with an LxN value grid and matching
/// observation mask. Grid cells where the mask is false are placeholders
/// (zero) and carry no information; the mask is authoritative.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorRepresentation {
    pub times: Vec<f64>,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl VectorRepresentation {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_observations(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn value_at(&self, row: usize, var: usize) -> Option<f64> {
        self.mask[[row, var]].then(|| self.values[[row, var]])
    }

    /// Per-variable observation sequences drawn from the grid.
    pub fn to_series(&self) -> SeriesRepresentation {
        let n = self.n_vars();
        let mut series = vec![Vec::new(); n];
        for (row, &t) in self.times.iter().enumerate() {
            for (var, seq) in series.iter_mut().enumerate() {
                if self.mask[[row, var]] {
                    seq.push((t, self.values[[row, var]]));
                }
            }
        }
        SeriesRepresentation { series }
    }
}

/// One observation sequence per variable, each sorted by time. Variables
/// without observations hold empty sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRepresentation {
    /// series[n] = [(t, value), ...] for variable n.
    pub series: Vec<Vec<(f64, f64)>>,
}

impl SeriesRepresentation {
    pub fn n_vars(&self) -> usize {
        self.series.len()
    }

    pub fn n_observations(&self) -> usize {
        self.series.iter().map(Vec::len).sum()
    }

    /// Flattens back to chronologically sorted tuples.
    pub fn to_set(&self) -> SetRepresentation {
        let mut tuples: Vec<Observation> = self
            .series
            .iter()
            .enumerate()
            .flat_map(|(var, seq)| seq.iter().map(move |&(t, val)| Observation { t, var, val }))
            .collect();
        sort_tuples(&mut tuples);
        SetRepresentation { tuples }
    }
}

fn sort_tuples(tuples: &mut [Observation]) {
    tuples.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.var.cmp(&b.var)));
}

/// Sorted tuple view of a sample.
pub fn to_set(sample: &Sample) -> SetRepresentation {
    let mut tuples = sample.observations.clone();
    sort_tuples(&mut tuples);
    SetRepresentation { tuples }
}

/// Grid view of a sample.
pub fn to_vector(sample: &Sample) -> VectorRepresentation {
    to_set(sample).to_vector(sample.n_vars)
}

/// Per-variable view of a sample.
pub fn to_series(sample: &Sample) -> SeriesRepresentation {
    let mut series = vec![Vec::new(); sample.n_vars];
    let set = to_set(sample);
    for obs in &set.tuples {
        series[obs.var].push((obs.t, obs.val));
    }
    SeriesRepresentation { series }
}
