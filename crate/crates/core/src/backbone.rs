//! Frozen sequence encoder: a pre-norm residual transformer stack with
//! configurable causality, layer truncation (first K layers), a positional
//! mode switch, and a freeze policy. A deterministic tiny instantiation
//! backs tests and desk-scale runs; real weights load from a named-tensor
//! archive under the same parameter names.
//!
//! In `External` positional mode the encoder consumes pre-embedded vectors
//! and adds no position information of its own (the caller supplies
//! continuous-time or variable embeddings). In `LearnedTrainable` mode the
//! stored position table is added to the inputs and is trainable while the
//! blocks stay frozen.

use crate::archive::{ArchiveError, NamedTensorArchive, TensorEntry};
use crate::autodiff::Var;
use crate::params::{ParamError, ParamStore, Session};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("bad backbone config: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("positional table unavailable in external positional mode")]
    PositionalMode,
    #[error("position {index} beyond table length {len}")]
    PositionOutOfRange { index: usize, len: usize },
}

/// Where position information comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionalMode {
    /// The caller adds time/variable embeddings; no position table is used.
    External,
    /// The stored position table is added to the inputs and fine-tuned.
    LearnedTrainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Number of (leading) layers used: the stack keeps the first K layers.
    pub n_layers_used: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub causal: bool,
    pub positional_mode: PositionalMode,
    /// Position-table length allocated by the tiny instantiation.
    pub max_positions: usize,
    /// Dropout stays off everywhere; kept explicit because the stack refuses
    /// to build otherwise.
    pub dropout_disabled: bool,
}

impl BackboneConfig {
    pub fn tiny(n_layers_used: usize, hidden: usize, causal: bool) -> Self {
        Self {
            n_layers_used,
            hidden,
            heads: 4,
            ffn_mult: 4,
            causal,
            positional_mode: PositionalMode::External,
            max_positions: 512,
            dropout_disabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.n_layers_used == 0 {
            return Err(BackboneError::Config("need at least one layer".into()));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(BackboneError::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(BackboneError::Config("ffn_mult must be positive".into()));
        }
        if !self.dropout_disabled {
            return Err(BackboneError::Config(
                "dropout is not supported; set dropout_disabled".into(),
            ));
        }
        Ok(())
    }
}

/// Name patterns (substring match on the encoder-relative parameter name)
/// that stay trainable; everything else is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable_patterns: Vec<String>,
}

impl FreezePolicy {
    /// Default adaptation regime: only normalization gains/biases train.
    pub fn norm_only() -> Self {
        Self {
            trainable_patterns: vec!["norm".to_string()],
        }
    }

    /// Every backbone parameter trains (the trainable-stack ablation).
    pub fn all_trainable() -> Self {
        Self {
            trainable_patterns: vec![String::new()],
        }
    }

    pub fn is_trainable(&self, rel_name: &str) -> bool {
        self.trainable_patterns.iter().any(|p| rel_name.contains(p.as_str()))
    }
}

/// A frozen transformer stack bound to a parameter-store prefix.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub prefix: String,
    pub config: BackboneConfig,
    /// Rows actually available in the position table.
    pos_len: usize,
}

/// Relative names of every tensor a K-layer stack declares.
fn declared_tensors(config: &BackboneConfig) -> Vec<(String, (usize, usize))> {
    let d = config.hidden;
    let f = d * config.ffn_mult;
    let mut names = Vec::new();
    for i in 0..config.n_layers_used {
        let b = format!("block{i}");
        names.push((format!("{b}.norm1.gain"), (1, d)));
        names.push((format!("{b}.norm1.bias"), (1, d)));
        for w in ["wq", "wk", "wv", "wo"] {
            names.push((format!("{b}.attn.{w}"), (d, d)));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            names.push((format!("{b}.attn.{bias}"), (1, d)));
        }
        names.push((format!("{b}.norm2.gain"), (1, d)));
        names.push((format!("{b}.norm2.bias"), (1, d)));
        names.push((format!("{b}.ffn.w1"), (d, f)));
        names.push((format!("{b}.ffn.b1"), (1, f)));
        names.push((format!("{b}.ffn.w2"), (f, d)));
        names.push((format!("{b}.ffn.b2"), (1, d)));
    }
    names.push(("final_norm.gain".to_string(), (1, d)));
    names.push(("final_norm.bias".to_string(), (1, d)));
    names
}

impl SequenceEncoder {
    /// Builds a deterministic tiny stack from a seed and registers its
    /// parameters under `prefix` with freeze tags from the policy.
    pub fn init_tiny(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        policy: &FreezePolicy,
        seed: u64,
    ) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        for (rel, (rows, cols)) in declared_tensors(config) {
            let value = if rel.contains("gain") {
                Array2::from_elem((rows, cols), 1.0)
            } else if rel.contains("bias") || rel.contains(".b") {
                Array2::zeros((rows, cols))
            } else {
                Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
            };
            store.register(
                &format!("{prefix}.{rel}"),
                value,
                policy.is_trainable(&rel),
            )?;
        }
        let pos = Array2::from_shape_fn((config.max_positions, config.hidden), |_| {
            normal.sample(&mut rng)
        });
        store.register(
            &format!("{prefix}.pos_table"),
            pos,
            pos_table_trainable(config, policy),
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            config: config.clone(),
            pos_len: config.max_positions,
        })
    }

    /// Builds a stack whose parameters equal the archive tensors bit-exactly.
    /// The archive must cover every tensor of the first K layers (relative
    /// names), plus `pos_table` when the positional mode is learned.
    pub fn from_archive(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        policy: &FreezePolicy,
        archive: &NamedTensorArchive,
    ) -> Result<Self, BackboneError> {
        config.validate()?;
        let load = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>, BackboneError> {
            let entry = archive.get(name)?;
            if entry.shape != [shape.0, shape.1] {
                return Err(ArchiveError::ShapeMismatch {
                    name: name.to_string(),
                    expected: vec![shape.0, shape.1],
                    got: entry.shape.clone(),
                }
                .into());
            }
            Ok(Array2::from_shape_vec(shape, entry.to_f64s()).unwrap())
        };
        for (rel, shape) in declared_tensors(config) {
            let value = load(&rel, shape)?;
            store.register(&format!("{prefix}.{rel}"), value, policy.is_trainable(&rel))?;
        }
        let pos_len = match archive.tensors.get("pos_table") {
            Some(entry) => {
                if entry.shape.len() != 2 || entry.shape[1] != config.hidden {
                    return Err(ArchiveError::ShapeMismatch {
                        name: "pos_table".into(),
                        expected: vec![0, config.hidden],
                        got: entry.shape.clone(),
                    }
                    .into());
                }
                let rows = entry.shape[0];
                let value = Array2::from_shape_vec((rows, config.hidden), entry.to_f64s()).unwrap();
                store.register(
                    &format!("{prefix}.pos_table"),
                    value,
                    pos_table_trainable(config, policy),
                )?;
                rows
            }
            None => {
                if config.positional_mode == PositionalMode::LearnedTrainable {
                    return Err(ArchiveError::Missing("pos_table".into()).into());
                }
                0
            }
        };
        Ok(Self {
            prefix: prefix.to_string(),
            config: config.clone(),
            pos_len,
        })
    }

    /// Copies this encoder's parameters out of the store as an archive
    /// (relative names, f64 payloads).
    pub fn to_archive(&self, store: &ParamStore) -> Result<NamedTensorArchive, BackboneError> {
        let mut archive = NamedTensorArchive::new();
        for (rel, _) in declared_tensors(&self.config) {
            let value = store.get(&self.name(&rel))?;
            let flat: Vec<f64> = value.iter().copied().collect();
            archive.insert(&rel, TensorEntry::from_f64s(vec![value.nrows(), value.ncols()], &flat));
        }
        if self.pos_len > 0 {
            let value = store.get(&self.name("pos_table"))?;
            let flat: Vec<f64> = value.iter().copied().collect();
            archive.insert(
                "pos_table",
                TensorEntry::from_f64s(vec![value.nrows(), value.ncols()], &flat),
            );
        }
        Ok(archive)
    }

    pub fn name(&self, rel: &str) -> String {
        format!("{}.{rel}", self.prefix)
    }

    /// Fully-qualified names of this encoder's parameters.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = declared_tensors(&self.config)
            .into_iter()
            .map(|(rel, _)| self.name(&rel))
            .collect();
        if self.pos_len > 0 {
            names.push(self.name("pos_table"));
        }
        names
    }

    /// One row of the learned position table (only in learned mode).
    pub fn positional_table(&self, store: &ParamStore, index: usize) -> Result<Vec<f64>, BackboneError> {
        if self.config.positional_mode != PositionalMode::LearnedTrainable {
            return Err(BackboneError::PositionalMode);
        }
        if index >= self.pos_len {
            return Err(BackboneError::PositionOutOfRange {
                index,
                len: self.pos_len,
            });
        }
        Ok(store.get(&self.name("pos_table"))?.row(index).to_vec())
    }

    /// Additive attention bias: 0 where attention is allowed, a large
    /// negative number where it is masked (padded keys, future positions
    /// under causal attention).
    fn attention_bias(&self, valid: &[bool]) -> Array2<f64> {
        let s = valid.len();
        Array2::from_shape_fn((s, s), |(i, j)| {
            let allowed = valid[j] && (!self.config.causal || j <= i);
            if allowed {
                0.0
            } else {
                MASK_NEG
            }
        })
    }

    /// Runs the stack over a padded SxD input. `valid` flags real positions;
    /// outputs at padded positions are unspecified and must be ignored.
    pub fn encode(&self, sess: &Session, x: Var, valid: &[bool]) -> Var {
        let (s, d) = sess.tape.shape(x);
        assert_eq!(d, self.config.hidden, "encode: width mismatch");
        assert_eq!(s, valid.len(), "encode: valid mask length mismatch");
        assert!(s >= 1, "encode: empty input");

        let tape = &sess.tape;
        let mut h = x;
        if self.config.positional_mode == PositionalMode::LearnedTrainable {
            assert!(
                s <= self.pos_len,
                "sequence length {s} exceeds position table ({})",
                self.pos_len
            );
            let table = sess.param(&self.name("pos_table"));
            let idx: Vec<usize> = (0..s).collect();
            let rows = tape.gather_rows(table, &idx);
            h = tape.add(h, rows);
        }

        let bias = tape.constant(self.attention_bias(valid));
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        for i in 0..self.config.n_layers_used {
            let b = format!("block{i}");
            let ln1 = tape.layer_norm(
                h,
                sess.param(&self.name(&format!("{b}.norm1.gain"))),
                sess.param(&self.name(&format!("{b}.norm1.bias"))),
                LAYER_NORM_EPS,
            );
            let q = tape.add_row(
                tape.matmul(ln1, sess.param(&self.name(&format!("{b}.attn.wq")))),
                sess.param(&self.name(&format!("{b}.attn.bq"))),
            );
            let k = tape.add_row(
                tape.matmul(ln1, sess.param(&self.name(&format!("{b}.attn.wk")))),
                sess.param(&self.name(&format!("{b}.attn.bk"))),
            );
            let v = tape.add_row(
                tape.matmul(ln1, sess.param(&self.name(&format!("{b}.attn.wv")))),
                sess.param(&self.name(&format!("{b}.attn.bv"))),
            );
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
                let att = tape.softmax_rows(tape.add(scores, bias));
                head_outs.push(tape.matmul(att, vh));
            }
            let merged = tape.concat_cols(&head_outs);
            let attn_out = tape.add_row(
                tape.matmul(merged, sess.param(&self.name(&format!("{b}.attn.wo")))),
                sess.param(&self.name(&format!("{b}.attn.bo"))),
            );
            h = tape.add(h, attn_out);

            let ln2 = tape.layer_norm(
                h,
                sess.param(&self.name(&format!("{b}.norm2.gain"))),
                sess.param(&self.name(&format!("{b}.norm2.bias"))),
                LAYER_NORM_EPS,
            );
            let mid = tape.gelu(tape.add_row(
                tape.matmul(ln2, sess.param(&self.name(&format!("{b}.ffn.w1")))),
                sess.param(&self.name(&format!("{b}.ffn.b1"))),
            ));
            let ffn_out = tape.add_row(
                tape.matmul(mid, sess.param(&self.name(&format!("{b}.ffn.w2")))),
                sess.param(&self.name(&format!("{b}.ffn.b2"))),
            );
            h = tape.add(h, ffn_out);
        }
        tape.layer_norm(
            h,
            sess.param(&self.name("final_norm.gain")),
            sess.param(&self.name("final_norm.bias")),
            LAYER_NORM_EPS,
        )
    }

    /// Zeroes the attention and feed-forward output projections of every
    /// block, reducing each residual block to the identity; the stack then
    /// computes only the final normalization. Test scaffolding.
    pub fn zero_residual_contributions(&self, store: &mut ParamStore) -> Result<(), BackboneError> {
        let d = self.config.hidden;
        let f = d * self.config.ffn_mult;
        for i in 0..self.config.n_layers_used {
            store.set(&self.name(&format!("block{i}.attn.wo")), Array2::zeros((d, d)))?;
            store.set(&self.name(&format!("block{i}.attn.bo")), Array2::zeros((1, d)))?;
            store.set(&self.name(&format!("block{i}.ffn.w2")), Array2::zeros((f, d)))?;
            store.set(&self.name(&format!("block{i}.ffn.b2")), Array2::zeros((1, d)))?;
        }
        Ok(())
    }
}

fn pos_table_trainable(config: &BackboneConfig, policy: &FreezePolicy) -> bool {
    config.positional_mode == PositionalMode::LearnedTrainable || policy.is_trainable("pos_table")
}
