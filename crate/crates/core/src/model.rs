//! Full task models: embedders + frozen encoder stack(s) + task head,
//! assembled from one configuration and a seed. Ablation flags translate
//! into structure here (absent embedders, skipped stages, learned positional
//! mode, all-trainable policies), so the parameter store contains exactly
//! what the configured model uses.

use crate::archive::NamedTensorArchive;
use crate::autodiff::Var;
use crate::backbone::{BackboneConfig, BackboneError, FreezePolicy, PositionalMode, SequenceEncoder};
use crate::data_model::{to_series, to_set, to_vector, Sample};
use crate::embedders::{MaskEmbedder, TimeEmbedder, ValueEmbedder, VariableEmbedder, VectorValueEmbedder};
use crate::heads::{prediction_loss_weights, ClassificationHead, HeadError, PredictionHead};
use crate::params::{ParamError, ParamStore, Session};
use crate::pipelines::{
    forward_series, forward_set, forward_vector, PipelineConfig, PipelineError, Representation,
    SeriesActivation, SeriesStage, Variant,
};
use crate::task_prep::{derive_seed, QuerySet};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("model config invalid: {0}")]
    Config(String),
    #[error("sample `{id}` exceeds the configured variable count ({got} > {max})")]
    TooManyVars { id: String, got: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classification,
    Interpolation,
    Extrapolation,
}

impl Task {
    pub fn is_prediction(self) -> bool {
        matches!(self, Task::Interpolation | Task::Extrapolation)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classification" => Some(Self::Classification),
            "interpolation" => Some(Self::Interpolation),
            "extrapolation" => Some(Self::Extrapolation),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Classification => "classification",
            Self::Interpolation => "interpolation",
            Self::Extrapolation => "extrapolation",
        }
    }
}

/// Everything needed to build a model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pipeline: PipelineConfig,
    pub task: Task,
    pub n_vars: usize,
    pub n_classes: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.pipeline.validate()?;
        if self.n_vars == 0 {
            return Err(ModelError::Config("n_vars must be positive".into()));
        }
        if self.task == Task::Classification {
            match self.n_classes {
                Some(c) if c >= 2 => {}
                _ => {
                    return Err(ModelError::Config(
                        "classification needs n_classes >= 2".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Pipeline output: one pooled row for set/vector, one row per variable for
/// the series path.
pub enum Features {
    Pooled(Var),
    Rows(Var),
}

pub struct ForwardTrace {
    pub features: Features,
    pub series: Option<SeriesActivation>,
}

/// A built model: parameter store plus the components the pipeline uses.
pub struct Model {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub time: Option<TimeEmbedder>,
    pub variables: Option<VariableEmbedder>,
    pub value: Option<ValueEmbedder>,
    pub vec_value: Option<VectorValueEmbedder>,
    pub mask: Option<MaskEmbedder>,
    pub intra: Option<SequenceEncoder>,
    pub inter: Option<SequenceEncoder>,
    pub cls_head: Option<ClassificationHead>,
    pub pred_head: Option<PredictionHead>,
}

impl Model {
    /// Builds a model with seeded tiny encoder stacks.
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        Self::build_with_archives(config, None, None)
    }

    /// Builds a model whose encoder weights come from archives when given
    /// (intra = time-aware stack, inter = variable-aware stack); otherwise
    /// tiny stacks are derived from the config seed.
    pub fn build_with_archives(
        config: &ModelConfig,
        intra_archive: Option<&NamedTensorArchive>,
        inter_archive: Option<&NamedTensorArchive>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "embedders"));
        let ab = config.pipeline.ablation;
        let series_path = config.pipeline.is_series_path();
        let d = config.hidden;
        let n = config.n_vars;

        let policy = if ab.rp_transformer {
            FreezePolicy::all_trainable()
        } else {
            FreezePolicy::norm_only()
        };

        let time = if ab.no_te {
            None
        } else {
            Some(TimeEmbedder::init(&mut store, "emb.time", d, &mut rng)?)
        };
        let needs_var_table = series_path || config.pipeline.representation == Representation::Set;
        let variables = if needs_var_table {
            Some(VariableEmbedder::init(&mut store, "emb.var", n, d, &mut rng)?)
        } else {
            None
        };
        let value = if series_path || config.pipeline.representation == Representation::Set {
            Some(ValueEmbedder::init(&mut store, "emb.val", d, &mut rng)?)
        } else {
            None
        };
        let (vec_value, mask) =
            if config.pipeline.representation == Representation::Vector && !series_path {
                (
                    Some(VectorValueEmbedder::init(&mut store, "emb.vecval", n, d, &mut rng)?),
                    Some(MaskEmbedder::init(&mut store, "emb.mask", n, d, &mut rng)?),
                )
            } else {
                (None, None)
            };

        let intra = if ab.no_ta {
            None
        } else {
            let cfg = BackboneConfig {
                n_layers_used: config.layers,
                hidden: d,
                heads: config.heads,
                ffn_mult: config.ffn_mult,
                causal: config.pipeline.composition.intra_causal(),
                positional_mode: if ab.no_te {
                    PositionalMode::LearnedTrainable
                } else {
                    PositionalMode::External
                },
                max_positions: config.max_positions,
                dropout_disabled: true,
            };
            Some(match intra_archive {
                Some(a) => SequenceEncoder::from_archive(&mut store, "ta", &cfg, &policy, a)?,
                None => SequenceEncoder::init_tiny(
                    &mut store,
                    "ta",
                    &cfg,
                    &policy,
                    derive_seed(config.seed, "ta"),
                )?,
            })
        };
        let inter = if series_path && !ab.no_va {
            let cfg = BackboneConfig {
                n_layers_used: config.layers,
                hidden: d,
                heads: config.heads,
                ffn_mult: config.ffn_mult,
                causal: config.pipeline.composition.inter_causal(),
                positional_mode: if ab.no_ve {
                    PositionalMode::LearnedTrainable
                } else {
                    PositionalMode::External
                },
                max_positions: config.max_positions.max(n),
                dropout_disabled: true,
            };
            Some(match inter_archive {
                Some(a) => SequenceEncoder::from_archive(&mut store, "va", &cfg, &policy, a)?,
                None => SequenceEncoder::init_tiny(
                    &mut store,
                    "va",
                    &cfg,
                    &policy,
                    derive_seed(config.seed, "va"),
                )?,
            })
        } else {
            None
        };

        let feature_width = if series_path { n * d } else { d };
        let (cls_head, pred_head) = match config.task {
            Task::Classification => (
                Some(ClassificationHead::init(
                    &mut store,
                    "head.cls",
                    feature_width,
                    config.n_classes.unwrap(),
                    &mut rng,
                )?),
                None,
            ),
            Task::Interpolation | Task::Extrapolation => (
                None,
                Some(PredictionHead::init(
                    &mut store,
                    "head.pred",
                    d,
                    if series_path { 1 } else { n },
                    &mut rng,
                )?),
            ),
        };

        Ok(Self {
            store,
            config: config.clone(),
            time,
            variables,
            value,
            vec_value,
            mask,
            intra,
            inter,
            cls_head,
            pred_head,
        })
    }

    fn series_stage(&self) -> SeriesStage<'_> {
        SeriesStage {
            time: self.time.as_ref(),
            variables: self.variables.as_ref().expect("series path has a variable table"),
            value: self.value.as_ref().expect("series path has a value embedder"),
            intra: self.intra.as_ref(),
            inter: self.inter.as_ref(),
            inter_variables: if self.config.pipeline.ablation.no_ve {
                None
            } else {
                self.variables.as_ref()
            },
        }
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ModelError> {
        if sample.n_vars > self.config.n_vars {
            return Err(ModelError::TooManyVars {
                id: sample.id.clone(),
                got: sample.n_vars,
                max: self.config.n_vars,
            });
        }
        Ok(())
    }

    /// Runs the configured pipeline over one sample. `pad_to` right-pads
    /// intra-stage sequences (batched execution); `None` runs natural
    /// lengths.
    pub fn forward(
        &self,
        sess: &Session,
        sample: &Sample,
        pad_to: Option<usize>,
    ) -> Result<ForwardTrace, ModelError> {
        self.check_sample(sample)?;
        let p = &self.config.pipeline;
        if p.is_series_path() {
            // Set-Hierarchy and Vec-Independent route through the identical
            // per-variable series code, which is what makes them equivalent
            // to the series pipeline bit-for-bit.
            let mut series = match p.variant {
                Some(Variant::VecIndependent) => to_vector(sample).to_series(),
                _ => to_series(sample),
            };
            series.series.resize(self.config.n_vars, Vec::new());
            let (out, acts) = forward_series(sess, &series, &self.series_stage(), pad_to)?;
            return Ok(ForwardTrace {
                features: Features::Rows(out),
                series: Some(acts),
            });
        }
        match p.representation {
            Representation::Set => {
                let (pooled, _) = forward_set(
                    sess,
                    &to_set(sample),
                    self.time.as_ref(),
                    self.variables.as_ref().expect("set pipeline has a variable table"),
                    self.value.as_ref().expect("set pipeline has a value embedder"),
                    self.intra.as_ref(),
                )?;
                Ok(ForwardTrace {
                    features: Features::Pooled(pooled),
                    series: None,
                })
            }
            Representation::Vector => {
                let mut vec = to_vector(sample);
                if vec.n_vars() < self.config.n_vars {
                    let (l, _) = vec.values.dim();
                    let mut values = Array2::zeros((l, self.config.n_vars));
                    let mut mask_grid = Array2::from_elem((l, self.config.n_vars), false);
                    values
                        .slice_mut(ndarray::s![.., ..vec.n_vars()])
                        .assign(&vec.values);
                    mask_grid
                        .slice_mut(ndarray::s![.., ..vec.n_vars()])
                        .assign(&vec.mask);
                    vec.values = values;
                    vec.mask = mask_grid;
                }
                let (pooled, _) = forward_vector(
                    sess,
                    &vec,
                    self.time.as_ref(),
                    self.vec_value.as_ref().expect("vector pipeline has a value embedder"),
                    self.mask.as_ref().expect("vector pipeline has a mask embedder"),
                    self.intra.as_ref(),
                    p.variant == Some(Variant::VecImputation),
                )?;
                Ok(ForwardTrace {
                    features: Features::Pooled(pooled),
                    series: None,
                })
            }
            Representation::Series => unreachable!("series handled above"),
        }
    }

    /// Classification feature row: the pooled vector, or the flattened NxD
    /// output for the series path.
    pub fn classification_features(&self, sess: &Session, trace: &ForwardTrace) -> Var {
        match trace.features {
            Features::Pooled(v) => v,
            Features::Rows(v) => {
                let (n, d) = sess.tape.shape(v);
                sess.tape.reshape(v, 1, n * d)
            }
        }
    }

    /// Cross-entropy training loss for a labeled sample.
    pub fn classification_loss(&self, sess: &Session, sample: &Sample) -> Result<Var, ModelError> {
        let label = sample
            .label
            .ok_or_else(|| ModelError::Config(format!("sample `{}` has no label", sample.id)))?;
        let trace = self.forward(sess, sample, None)?;
        let features = self.classification_features(sess, &trace);
        let head = self.cls_head.as_ref().expect("classification model has a head");
        let logits = head.logits(sess, features)?;
        Ok(sess.tape.cross_entropy_logits(logits, label))
    }

    /// Class probabilities for one sample (no gradients needed).
    pub fn classify_probs(&self, sample: &Sample) -> Result<Vec<f64>, ModelError> {
        let sess = Session::new(&self.store);
        let trace = self.forward(&sess, sample, None)?;
        let features = self.classification_features(&sess, &trace);
        let head = self.cls_head.as_ref().expect("classification model has a head");
        let probs = head.classify(&sess, features)?;
        Ok(sess.tape.value(probs).row(0).to_vec())
    }

    /// Per-variable double-average squared-error loss over a query set.
    pub fn prediction_loss(
        &self,
        sess: &Session,
        input: &Sample,
        queries: &QuerySet,
    ) -> Result<Var, ModelError> {
        let trace = self.forward(sess, input, None)?;
        let head = self.pred_head.as_ref().expect("prediction model has a head");
        let var_weights = prediction_loss_weights(&queries.q_n);
        match trace.features {
            Features::Pooled(pooled) => {
                let pairs: Vec<(f64, usize)> =
                    queries.queries.iter().map(|q| (q.t, q.var)).collect();
                let preds = head.predict_pooled(sess, pooled, &pairs)?;
                let targets = Array2::from_shape_vec(
                    (queries.len(), 1),
                    queries.queries.iter().map(|q| q.target).collect(),
                )
                .unwrap();
                let weights = Array2::from_shape_vec(
                    (queries.len(), 1),
                    queries.queries.iter().map(|q| var_weights[q.var]).collect(),
                )
                .unwrap();
                Ok(sess.tape.weighted_sq_err(preds, &targets, &weights))
            }
            Features::Rows(rows) => {
                let mut parts = Vec::new();
                let mut targets = Vec::new();
                let mut weights = Vec::new();
                for var in 0..self.config.n_vars {
                    if queries.q_n[var] == 0 {
                        continue;
                    }
                    let times: Vec<f64> = queries
                        .queries
                        .iter()
                        .filter(|q| q.var == var)
                        .map(|q| q.t)
                        .collect();
                    targets.extend(
                        queries
                            .queries
                            .iter()
                            .filter(|q| q.var == var)
                            .map(|q| q.target),
                    );
                    weights.extend(std::iter::repeat(var_weights[var]).take(times.len()));
                    let row = sess.tape.slice_rows(rows, var, 1);
                    parts.push(head.predict_series(sess, row, &times)?);
                }
                let preds = sess.tape.concat_rows(&parts);
                let q = targets.len();
                Ok(sess.tape.weighted_sq_err(
                    preds,
                    &Array2::from_shape_vec((q, 1), targets).unwrap(),
                    &Array2::from_shape_vec((q, 1), weights).unwrap(),
                ))
            }
        }
    }

    /// Point predictions for each query, aligned with the input order.
    pub fn predict(&self, input: &Sample, queries: &QuerySet) -> Result<Vec<f64>, ModelError> {
        let sess = Session::new(&self.store);
        let trace = self.forward(&sess, input, None)?;
        let head = self.pred_head.as_ref().expect("prediction model has a head");
        match trace.features {
            Features::Pooled(pooled) => {
                let pairs: Vec<(f64, usize)> =
                    queries.queries.iter().map(|q| (q.t, q.var)).collect();
                let preds = head.predict_pooled(&sess, pooled, &pairs)?;
                Ok(sess.tape.value(preds).column(0).to_vec())
            }
            Features::Rows(rows) => {
                let mut out = vec![0.0; queries.len()];
                for var in 0..self.config.n_vars {
                    let idx: Vec<usize> = queries
                        .queries
                        .iter()
                        .enumerate()
                        .filter(|(_, q)| q.var == var)
                        .map(|(i, _)| i)
                        .collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let times: Vec<f64> = idx.iter().map(|&i| queries.queries[i].t).collect();
                    let row = sess.tape.slice_rows(rows, var, 1);
                    let preds = sess.tape.value(head.predict_series(&sess, row, &times)?);
                    for (k, &i) in idx.iter().enumerate() {
                        out[i] = preds[[k, 0]];
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn trainable_value_count(&self) -> usize {
        self.store.n_trainable_values()
    }
}
