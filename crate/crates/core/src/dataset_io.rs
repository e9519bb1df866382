//! On-disk dataset format and a synthetic generator for desk-scale runs.
//!
//! A dataset file is UTF-8 text: line 1 holds the manifest record, every
//! following line one sample record, both as JSON. Times and values are
//! stored raw (un-normalized); serialization uses the shortest decimal that
//! round-trips the exact double, so save followed by load is the identity.

use crate::data_model::{Observation, Sample, ValidationError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Validation {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("manifest invalid: {0}")]
    Manifest(String),
    #[error("synthetic spec invalid: {0}")]
    Spec(String),
}

/// Dataset-level metadata stored on the first line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub n_vars: usize,
    pub n_classes: Option<usize>,
    /// Nominal observation-window length in raw time units.
    pub horizon: f64,
    pub variables: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.horizon > 0.0) {
            return Err(DatasetError::Manifest(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.variables.len() != self.n_vars {
            return Err(DatasetError::Manifest(format!(
                "expected {} variable names, got {}",
                self.n_vars,
                self.variables.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    label: Option<usize>,
    attrs: BTreeMap<String, String>,
    obs: Vec<(f64, usize, f64)>,
}

/// Writes a manifest plus samples; output bytes are a pure function of the
/// input.
pub fn save_dataset(
    manifest: &DatasetManifest,
    samples: &[Sample],
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    manifest.validate()?;
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let manifest_line = serde_json::to_string(manifest)
        .map_err(|e| DatasetError::Manifest(e.to_string()))?;
    writeln!(w, "{manifest_line}").map_err(io_err)?;
    for s in samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            label: s.label,
            attrs: s.attrs.clone(),
            obs: s.observations.iter().map(|o| (o.t, o.var, o.val)).collect(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| DatasetError::Manifest(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a dataset file; every sample is validated and file order is kept.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Sample>), DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut manifest: Option<DatasetManifest> = None;
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if manifest.is_none() {
            let m: DatasetManifest = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: line_no,
                msg: e.to_string(),
            })?;
            m.validate()?;
            manifest = Some(m);
            continue;
        }
        let m = manifest.as_ref().unwrap();
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            line: line_no,
            msg: e.to_string(),
        })?;
        let observations = rec
            .obs
            .into_iter()
            .map(|(t, var, val)| Observation { t, var, val })
            .collect();
        let sample = Sample::new(rec.id, m.n_vars, observations, rec.label, rec.attrs)
            .map_err(|source| DatasetError::Validation { line: line_no, source })?;
        if let (Some(label), Some(n_classes)) = (sample.label, m.n_classes) {
            if label >= n_classes {
                return Err(DatasetError::Validation {
                    line: line_no,
                    source: ValidationError::LabelOutOfRange {
                        id: sample.id.clone(),
                        label,
                        n_classes,
                    },
                });
            }
        }
        samples.push(sample);
    }
    let manifest = manifest.ok_or(DatasetError::Malformed {
        line: 1,
        msg: "missing manifest line".to_string(),
    })?;
    Ok((manifest, samples))
}

/// Labeling rule for synthetic classification data: the class is the index
/// of the equal-width band the first variable's frequency falls into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRule {
    pub n_classes: usize,
}

/// Generation recipe for synthetic irregular series: per variable a noisy
/// sinusoid with per-sample random frequency and phase, observed at
/// irregular times drawn uniformly over the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_samples: usize,
    pub n_vars: usize,
    pub mean_obs_per_var: f64,
    /// Window length in raw time units; observation times are uniform in [0, horizon).
    pub horizon: f64,
    /// Frequency range per variable, in cycles per window.
    pub freq_ranges: Vec<(f64, f64)>,
    pub noise_sd: f64,
    pub class_rule: Option<ClassRule>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Convenience constructor applying one frequency range to every variable.
    pub fn uniform(
        name: impl Into<String>,
        n_samples: usize,
        n_vars: usize,
        mean_obs_per_var: f64,
        horizon: f64,
        freq_range: (f64, f64),
        noise_sd: f64,
        class_rule: Option<ClassRule>,
        seed: u64,
    ) -> Self {
        Self {
            name: name.into(),
            n_samples,
            n_vars,
            mean_obs_per_var,
            horizon,
            freq_ranges: vec![freq_range; n_vars],
            noise_sd,
            class_rule,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_samples == 0 || self.n_vars == 0 {
            return Err(DatasetError::Spec("n_samples and n_vars must be positive".into()));
        }
        if !(self.mean_obs_per_var > 0.0) {
            return Err(DatasetError::Spec("mean_obs_per_var must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(DatasetError::Spec("horizon must be positive".into()));
        }
        if self.freq_ranges.len() != self.n_vars {
            return Err(DatasetError::Spec(format!(
                "expected {} frequency ranges, got {}",
                self.n_vars,
                self.freq_ranges.len()
            )));
        }
        for &(lo, hi) in &self.freq_ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(DatasetError::Spec(format!("bad frequency range ({lo}, {hi})")));
            }
        }
        if !(self.noise_sd >= 0.0) {
            return Err(DatasetError::Spec("noise_sd must be non-negative".into()));
        }
        if let Some(rule) = &self.class_rule {
            if rule.n_classes < 2 {
                return Err(DatasetError::Spec("class rule needs at least 2 classes".into()));
            }
        }
        Ok(())
    }
}

/// The generating parameters behind one synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Per-variable frequency in cycles per window.
    pub freqs: Vec<f64>,
    /// Per-variable phase in radians.
    pub phases: Vec<f64>,
}

impl GenParams {
    /// Noiseless generator value for variable `var` at raw time `t`.
    pub fn clean_value(&self, var: usize, t: f64, horizon: f64) -> f64 {
        (2.0 * std::f64::consts::PI * self.freqs[var] * t / horizon + self.phases[var]).sin()
    }
}

/// Deterministic synthetic dataset; a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DatasetManifest, Vec<Sample>), DatasetError> {
    let (manifest, samples, _) = generate_synthetic_with_params(spec)?;
    Ok((manifest, samples))
}

/// Like [`generate_synthetic`] but also returns each sample's generating
/// parameters, for oracle checks against the noiseless curves.
pub fn generate_synthetic_with_params(
    spec: &SyntheticSpec,
) -> Result<(DatasetManifest, Vec<Sample>, Vec<GenParams>), DatasetError> {
    spec.validate()?;
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        n_vars: spec.n_vars,
        n_classes: spec.class_rule.as_ref().map(|r| r.n_classes),
        horizon: spec.horizon,
        variables: (0..spec.n_vars).map(|v| format!("var{v}")).collect(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sd > 0.0 {
        Some(Normal::new(0.0, spec.noise_sd).expect("validated noise_sd"))
    } else {
        None
    };
    let poisson = Poisson::new(spec.mean_obs_per_var).expect("validated mean_obs_per_var");
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut params = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut freqs = Vec::with_capacity(spec.n_vars);
        let mut phases = Vec::with_capacity(spec.n_vars);
        for &(lo, hi) in &spec.freq_ranges {
            freqs.push(if lo == hi { lo } else { rng.gen_range(lo..hi) });
            phases.push(rng.gen_range(0.0..two_pi));
        }
        let gen = GenParams { freqs, phases };

        let mut observations = Vec::new();
        for var in 0..spec.n_vars {
            let count = poisson.sample(&mut rng) as usize;
            for _ in 0..count {
                let t = rng.gen_range(0.0..spec.horizon);
                let mut val = gen.clean_value(var, t, spec.horizon);
                if let Some(n) = &noise {
                    val += n.sample(&mut rng);
                }
                observations.push(Observation { t, var, val });
            }
        }
        // Continuous draws collide with probability ~0; drop exact repeats
        // so the sample invariant holds regardless.
        observations.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.var.cmp(&b.var)));
        observations.dedup_by(|a, b| a.t == b.t && a.var == b.var);
        if observations.is_empty() {
            // All Poisson draws were zero; keep the sample valid with a
            // single observation of variable 0 at the window start.
            let mut val = gen.clean_value(0, 0.0, spec.horizon);
            if let Some(n) = &noise {
                val += n.sample(&mut rng);
            }
            observations.push(Observation { t: 0.0, var: 0, val });
        }

        let label = spec.class_rule.as_ref().map(|rule| {
            let (lo, hi) = spec.freq_ranges[0];
            frequency_band(gen.freqs[0], lo, hi, rule.n_classes)
        });
        let mut attrs = BTreeMap::new();
        let (lo, hi) = spec.freq_ranges[0];
        attrs.insert(
            "band".to_string(),
            format!("b{}", frequency_band(gen.freqs[0], lo, hi, 2)),
        );

        samples.push(
            Sample::new(format!("syn{i:05}"), spec.n_vars, observations, label, attrs)
                .expect("generator output is valid by construction"),
        );
        params.push(gen);
    }
    Ok((manifest, samples, params))
}

/// Index of the equal-width band of `[lo, hi]` that `f` falls into.
fn frequency_band(f: f64, lo: f64, hi: f64, n_bands: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let x = (f - lo) / (hi - lo);
    ((x * n_bands as f64) as usize).min(n_bands - 1)
}
