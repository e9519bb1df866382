//! Forward pipelines over the three representations.
//!
//! Set and vector inputs run through one time-aware encoder and mean-pool
//! into a single hidden vector. Series inputs run two stages: each
//! variable's sequence is encoded with a prepended variable-embedding prompt
//! token (stage one), then the pooled per-variable summaries — with variable
//! embeddings standing in for positions — are encoded across variables
//! (stage two), yielding one output row per variable.
//!
//! Ablation switches are expressed structurally: a `None` time embedder
//! omits continuous-time embeddings (the encoder is then built in learned
//! positional mode), a `None` encoder skips that encoding stage (inputs pool
//! directly for the intra stage; the stacked summaries pass through for the
//! inter stage).

use crate::autodiff::Var;
use crate::backbone::SequenceEncoder;
use crate::data_model::{SeriesRepresentation, SetRepresentation, VectorRepresentation};
use crate::embedders::{MaskEmbedder, TimeEmbedder, ValueEmbedder, VariableEmbedder, VectorValueEmbedder};
use crate::params::Session;
use crate::task_prep::forward_fill;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline input is empty")]
    EmptyInput,
    #[error("variant {variant:?} is not legal for representation {repr:?}")]
    IllegalVariant {
        variant: Variant,
        repr: Representation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    Set,
    Vector,
    Series,
}

/// Analysis variants of the set/vector pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Set input processed hierarchically per variable; equivalent to the
    /// series pipeline by construction.
    SetHierarchy,
    /// Vector input split into per-variable observed series, then the
    /// two-stage series path.
    VecIndependent,
    /// Vector input forward-filled before embedding.
    VecImputation,
}

/// Attention-direction composition of the two encoding stages; the first
/// letter is the intra (time-aware) stage, the second the inter
/// (variable-aware) stage. `c` = causal, `b` = bidirectional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Composition {
    #[default]
    Cb,
    Cc,
    Bb,
    Bc,
}

impl Composition {
    pub fn intra_causal(self) -> bool {
        matches!(self, Composition::Cb | Composition::Cc)
    }

    pub fn inter_causal(self) -> bool {
        matches!(self, Composition::Cc | Composition::Bc)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cb" => Some(Self::Cb),
            "cc" => Some(Self::Cc),
            "bb" => Some(Self::Bb),
            "bc" => Some(Self::Bc),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cb => "cb",
            Self::Cc => "cc",
            Self::Bb => "bb",
            Self::Bc => "bc",
        }
    }
}

/// Model ablations (each removes or replaces one mechanism).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Replace the time-aware encoding stage with direct pooling.
    pub no_ta: bool,
    /// Drop the variable-aware (inter) stage; the stacked summaries pass through.
    pub no_va: bool,
    /// Drop continuous-time embeddings; fine-tune the original position table instead.
    pub no_te: bool,
    /// Drop variable embeddings in the inter stage; fine-tune positions instead.
    pub no_ve: bool,
    /// Replace frozen stacks with fully trainable ones of the same shape.
    pub rp_transformer: bool,
}

/// Which pipeline to run and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub representation: Representation,
    pub variant: Option<Variant>,
    pub ablation: AblationFlags,
    pub composition: Composition,
}

impl PipelineConfig {
    pub fn new(representation: Representation) -> Self {
        Self {
            representation,
            variant: None,
            ablation: AblationFlags::default(),
            composition: Composition::default(),
        }
    }

    /// Does this configuration run the two-stage (series) path?
    pub fn is_series_path(&self) -> bool {
        matches!(self.representation, Representation::Series)
            || matches!(self.variant, Some(Variant::SetHierarchy) | Some(Variant::VecIndependent))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if let Some(v) = self.variant {
            let ok = match v {
                Variant::SetHierarchy => self.representation == Representation::Set,
                Variant::VecIndependent | Variant::VecImputation => {
                    self.representation == Representation::Vector
                }
            };
            if !ok {
                return Err(PipelineError::IllegalVariant {
                    variant: v,
                    repr: self.representation,
                });
            }
        }
        Ok(())
    }
}

/// Mean over valid positions only.
pub fn pool_mean(sess: &Session, hidden: Var, valid: &[bool]) -> Var {
    sess.tape.mean_rows_masked(hidden, valid)
}

/// Captured intermediate tensors of a single-encoder (set/vector) pass.
pub struct FlatActivation {
    pub embedded: Var,
    pub time_embedding: Option<Var>,
    pub hidden: Var,
    pub pooled: Var,
}

/// Set pipeline: per-tuple variable + value embeddings, time embeddings
/// added per position, one encoder pass, mean pooling. Returns a 1xD row.
pub fn forward_set(
    sess: &Session,
    set: &SetRepresentation,
    time: Option<&TimeEmbedder>,
    variables: &VariableEmbedder,
    value: &ValueEmbedder,
    encoder: Option<&SequenceEncoder>,
) -> Result<(Var, FlatActivation), PipelineError> {
    if set.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let times: Vec<f64> = set.tuples.iter().map(|o| o.t).collect();
    let vars: Vec<usize> = set.tuples.iter().map(|o| o.var).collect();
    let vals: Vec<f64> = set.tuples.iter().map(|o| o.val).collect();
    let z = sess
        .tape
        .add(variables.embed(sess, &vars), value.embed(sess, &vals));
    let te = time.map(|t| t.embed(sess, &times));
    let z_in = match te {
        Some(te) => sess.tape.add(z, te),
        None => z,
    };
    let valid = vec![true; set.len()];
    let hidden = match encoder {
        Some(enc) => enc.encode(sess, z_in, &valid),
        None => z_in,
    };
    let pooled = pool_mean(sess, hidden, &valid);
    Ok((
        pooled,
        FlatActivation {
            embedded: z,
            time_embedding: te,
            hidden,
            pooled,
        },
    ))
}

/// Vector pipeline: per-timestamp value-vector + mask embeddings (no
/// variable embedding), time embeddings, one encoder pass, mean pooling.
/// Unobserved cells are zero-filled before the value embedder; the
/// imputation variant forward-fills instead.
pub fn forward_vector(
    sess: &Session,
    vec: &VectorRepresentation,
    time: Option<&TimeEmbedder>,
    value: &VectorValueEmbedder,
    mask: &MaskEmbedder,
    encoder: Option<&SequenceEncoder>,
    impute: bool,
) -> Result<(Var, FlatActivation), PipelineError> {
    if vec.n_times() == 0 {
        return Err(PipelineError::EmptyInput);
    }
    let filled;
    let source = if impute {
        filled = forward_fill(vec);
        &filled
    } else {
        vec
    };
    let (l, n) = source.values.dim();
    // Zero-fill unobserved cells; the mask channel carries missingness.
    let x = Array2::from_shape_fn((l, n), |(i, j)| {
        if source.mask[[i, j]] || impute {
            source.values[[i, j]]
        } else {
            0.0
        }
    });
    let m = Array2::from_shape_fn((l, n), |(i, j)| f64::from(source.mask[[i, j]]));
    let z = sess.tape.add(value.embed(sess, &x), mask.embed(sess, &m));
    let te = time.map(|t| t.embed(sess, &source.times));
    let z_in = match te {
        Some(te) => sess.tape.add(z, te),
        None => z,
    };
    let valid = vec![true; l];
    let hidden = match encoder {
        Some(enc) => enc.encode(sess, z_in, &valid),
        None => z_in,
    };
    let pooled = pool_mean(sess, hidden, &valid);
    Ok((
        pooled,
        FlatActivation {
            embedded: z,
            time_embedding: te,
            hidden,
            pooled,
        },
    ))
}

/// Captured tensors of the two-stage series pass.
pub struct SeriesActivation {
    /// Per-variable encoder outputs (padded rows included when padding).
    pub per_var_hidden: Vec<Var>,
    /// Pooled per-variable summaries h^n.
    pub per_var_pooled: Vec<Var>,
    /// Stacked NxD summary matrix before the inter stage.
    pub stacked: Var,
    /// Variable embeddings added in the inter stage, when present.
    pub inter_variable_embedding: Option<Var>,
    /// Final NxD output rows.
    pub output: Var,
}

/// Components of the series path. `None` fields encode ablations.
pub struct SeriesStage<'a> {
    /// Continuous-time embedder; `None` omits time embeddings.
    pub time: Option<&'a TimeEmbedder>,
    /// Variable table used for prompt tokens (and the inter stage below).
    pub variables: &'a VariableEmbedder,
    pub value: &'a ValueEmbedder,
    /// Intra-series encoder; `None` pools embedded inputs directly.
    pub intra: Option<&'a SequenceEncoder>,
    /// Inter-series encoder; `None` passes the stacked summaries through.
    pub inter: Option<&'a SequenceEncoder>,
    /// Variable embeddings added before the inter encoder; `None` omits them.
    pub inter_variables: Option<&'a VariableEmbedder>,
}

/// Intra-series stage for one variable: prompt token prepended to the
/// embedded values, a zero row prepended to the time embeddings, encode,
/// mean-pool over the L_n+1 real positions (prompt included). An empty
/// variable reduces to the lone prompt token. `pad_to` right-pads the
/// sequence with zero rows flagged invalid.
pub fn forward_series_intra(
    sess: &Session,
    series: &SeriesRepresentation,
    var: usize,
    stage: &SeriesStage,
    pad_to: Option<usize>,
) -> (Var, Var) {
    let seq = &series.series[var];
    let tape = &sess.tape;
    let dim = stage.variables.dim;
    let prompt = stage.variables.embed(sess, &[var]);
    let z = if seq.is_empty() {
        prompt
    } else {
        let vals: Vec<f64> = seq.iter().map(|&(_, x)| x).collect();
        tape.concat_rows(&[prompt, stage.value.embed(sess, &vals)])
    };
    let z = match stage.time {
        Some(time) if !seq.is_empty() => {
            let times: Vec<f64> = seq.iter().map(|&(t, _)| t).collect();
            let zero_row = tape.constant(Array2::zeros((1, dim)));
            let te = tape.concat_rows(&[zero_row, time.embed(sess, &times)]);
            tape.add(z, te)
        }
        // The prompt token's time embedding is the all-zero vector, so an
        // empty variable adds nothing.
        _ => z,
    };
    let real_len = seq.len() + 1;
    let (z, valid) = match pad_to {
        Some(padded_len) if padded_len > real_len => {
            let pad = tape.constant(Array2::zeros((padded_len - real_len, dim)));
            let mut valid = vec![true; real_len];
            valid.resize(padded_len, false);
            (tape.concat_rows(&[z, pad]), valid)
        }
        _ => (z, vec![true; real_len]),
    };
    let hidden = match stage.intra {
        Some(enc) => enc.encode(sess, z, &valid),
        None => z,
    };
    let pooled = pool_mean(sess, hidden, &valid);
    (pooled, hidden)
}

/// Inter-series stage: adds variable embeddings to the stacked NxD summary
/// rows and encodes across variables. Output rows stay variable-aligned.
pub fn forward_series_inter(
    sess: &Session,
    stacked: Var,
    inter_variables: Option<&VariableEmbedder>,
    encoder: &SequenceEncoder,
) -> (Var, Option<Var>) {
    let (n, _) = sess.tape.shape(stacked);
    let ve = inter_variables.map(|v| v.embed(sess, &(0..n).collect::<Vec<_>>()));
    let h = match ve {
        Some(ve) => sess.tape.add(stacked, ve),
        None => stacked,
    };
    (encoder.encode(sess, h, &vec![true; n]), ve)
}

/// Full two-stage series pipeline. Returns the NxD output rows.
pub fn forward_series(
    sess: &Session,
    series: &SeriesRepresentation,
    stage: &SeriesStage,
    pad_to: Option<usize>,
) -> Result<(Var, SeriesActivation), PipelineError> {
    let n = series.n_vars();
    if n == 0 {
        return Err(PipelineError::EmptyInput);
    }
    let mut per_var_pooled = Vec::with_capacity(n);
    let mut per_var_hidden = Vec::with_capacity(n);
    for var in 0..n {
        let (pooled, hidden) = forward_series_intra(sess, series, var, stage, pad_to);
        per_var_pooled.push(pooled);
        per_var_hidden.push(hidden);
    }
    let stacked = sess.tape.concat_rows(&per_var_pooled);
    let (output, ve) = match stage.inter {
        Some(encoder) => forward_series_inter(sess, stacked, stage.inter_variables, encoder),
        None => (stacked, None),
    };
    Ok((
        output,
        SeriesActivation {
            per_var_hidden,
            per_var_pooled,
            stacked,
            inter_variable_embedding: ve,
            output,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, FreezePolicy, LAYER_NORM_EPS};
    use crate::data_model::{to_series, to_set, to_vector, Observation, Sample};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeMap;

    const D: usize = 8;

    struct Fixture {
        store: ParamStore,
        time: TimeEmbedder,
        variables: VariableEmbedder,
        value: ValueEmbedder,
        vec_value: VectorValueEmbedder,
        mask: MaskEmbedder,
        intra: SequenceEncoder,
        inter: SequenceEncoder,
    }

    fn fixture(seed: u64, n_vars: usize, intra_causal: bool) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let time = TimeEmbedder::init(&mut store, "emb.time", D, &mut rng).unwrap();
        let variables = VariableEmbedder::init(&mut store, "emb.var", n_vars, D, &mut rng).unwrap();
        let value = ValueEmbedder::init(&mut store, "emb.val", D, &mut rng).unwrap();
        let vec_value =
            VectorValueEmbedder::init(&mut store, "emb.vecval", n_vars, D, &mut rng).unwrap();
        let mask = MaskEmbedder::init(&mut store, "emb.mask", n_vars, D, &mut rng).unwrap();
        let cfg_intra = BackboneConfig {
            heads: 2,
            max_positions: 64,
            ..BackboneConfig::tiny(2, D, intra_causal)
        };
        let cfg_inter = BackboneConfig {
            heads: 2,
            max_positions: 64,
            ..BackboneConfig::tiny(2, D, false)
        };
        let intra = SequenceEncoder::init_tiny(
            &mut store,
            "ta",
            &cfg_intra,
            &FreezePolicy::norm_only(),
            seed + 1,
        )
        .unwrap();
        let inter = SequenceEncoder::init_tiny(
            &mut store,
            "va",
            &cfg_inter,
            &FreezePolicy::norm_only(),
            seed + 2,
        )
        .unwrap();
        Fixture {
            store,
            time,
            variables,
            value,
            vec_value,
            mask,
            intra,
            inter,
        }
    }

    impl Fixture {
        fn stage(&self) -> SeriesStage<'_> {
            SeriesStage {
                time: Some(&self.time),
                variables: &self.variables,
                value: &self.value,
                intra: Some(&self.intra),
                inter: Some(&self.inter),
                inter_variables: Some(&self.variables),
            }
        }
    }

    fn obs(t: f64, var: usize, val: f64) -> Observation {
        Observation { t, var, val }
    }

    fn sample(n_vars: usize, observations: Vec<Observation>) -> Sample {
        Sample::new("s", n_vars, observations, None, BTreeMap::new()).unwrap()
    }

    #[test]
    fn pool_mean_examples() {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let x = sess
            .tape
            .constant(ndarray::array![[1.0, 1.0], [3.0, 3.0]]);
        let pooled = sess.tape.value(pool_mean(&sess, x, &[true, true]));
        assert_eq!(pooled, ndarray::array![[2.0, 2.0]]);
        let single = sess.tape.constant(ndarray::array![[0.5, -0.25]]);
        assert_eq!(
            sess.tape.value(pool_mean(&sess, single, &[true])),
            ndarray::array![[0.5, -0.25]]
        );
        // Appending padded rows changes nothing.
        let padded = sess
            .tape
            .constant(ndarray::array![[1.0, 1.0], [3.0, 3.0], [99.0, 99.0]]);
        assert_eq!(
            sess.tape.value(pool_mean(&sess, padded, &[true, true, false])),
            ndarray::array![[2.0, 2.0]]
        );
    }

    #[test]
    fn forward_set_single_tuple_under_zeroed_encoder() {
        let mut fx = fixture(1, 2, true);
        fx.intra.zero_residual_contributions(&mut fx.store).unwrap();
        let s = sample(2, vec![obs(0.4, 1, 2.5)]);
        let sess = Session::new(&fx.store);
        let (pooled, _) = forward_set(
            &sess,
            &to_set(&s),
            Some(&fx.time),
            &fx.variables,
            &fx.value,
            Some(&fx.intra),
        )
        .unwrap();
        let got = sess.tape.value(pooled);
        // Expected: final_norm(variable row + value embed + time embed).
        let expect = {
            let sess2 = Session::new(&fx.store);
            let z = sess2.tape.add(
                fx.variables.embed(&sess2, &[1]),
                fx.value.embed(&sess2, &[2.5]),
            );
            let z = sess2.tape.add(z, fx.time.embed(&sess2, &[0.4]));
            let ln = sess2.tape.layer_norm(
                z,
                sess2.param(&fx.intra.name("final_norm.gain")),
                sess2.param(&fx.intra.name("final_norm.bias")),
                LAYER_NORM_EPS,
            );
            sess2.tape.value(ln)
        };
        assert_eq!(got, expect);
    }

    #[test]
    fn bidirectional_set_pipeline_is_permutation_invariant() {
        let fx = fixture(2, 3, false);
        let s = sample(
            3,
            vec![
                obs(0.1, 0, 1.0),
                obs(0.3, 2, -0.5),
                obs(0.5, 1, 0.25),
                obs(0.8, 0, 2.0),
            ],
        );
        let set = to_set(&s);
        let sess = Session::new(&fx.store);
        let (pooled, _) = forward_set(
            &sess,
            &set,
            Some(&fx.time),
            &fx.variables,
            &fx.value,
            Some(&fx.intra),
        )
        .unwrap();
        let base = sess.tape.value(pooled);
        // Feed tuples in a scrambled order (times travel with tuples).
        let mut scrambled = set.clone();
        scrambled.tuples.swap(0, 3);
        scrambled.tuples.swap(1, 2);
        let sess2 = Session::new(&fx.store);
        let (pooled2, _) = forward_set(
            &sess2,
            &scrambled,
            Some(&fx.time),
            &fx.variables,
            &fx.value,
            Some(&fx.intra),
        )
        .unwrap();
        let perm = sess2.tape.value(pooled2);
        for (a, b) in base.iter().zip(perm.iter()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn forward_vector_single_row_under_zeroed_encoder() {
        let mut fx = fixture(3, 2, true);
        fx.intra.zero_residual_contributions(&mut fx.store).unwrap();
        let s = sample(2, vec![obs(0.2, 0, 1.5)]);
        let v = to_vector(&s);
        let sess = Session::new(&fx.store);
        let (pooled, _) = forward_vector(
            &sess,
            &v,
            Some(&fx.time),
            &fx.vec_value,
            &fx.mask,
            Some(&fx.intra),
            false,
        )
        .unwrap();
        let got = sess.tape.value(pooled);
        let expect = {
            let sess2 = Session::new(&fx.store);
            let x = ndarray::array![[1.5, 0.0]];
            let m = ndarray::array![[1.0, 0.0]];
            let z = sess2.tape.add(
                fx.vec_value.embed(&sess2, &x),
                fx.mask.embed(&sess2, &m),
            );
            let z = sess2.tape.add(z, fx.time.embed(&sess2, &[0.2]));
            let ln = sess2.tape.layer_norm(
                z,
                sess2.param(&fx.intra.name("final_norm.gain")),
                sess2.param(&fx.intra.name("final_norm.bias")),
                LAYER_NORM_EPS,
            );
            sess2.tape.value(ln)
        };
        assert_eq!(got, expect);
    }

    #[test]
    fn imputation_variant_is_identity_on_fully_observed_input() {
        let fx = fixture(4, 2, true);
        let s = sample(
            2,
            vec![obs(0.1, 0, 1.0), obs(0.1, 1, 2.0), obs(0.6, 0, 3.0), obs(0.6, 1, 4.0)],
        );
        let v = to_vector(&s);
        let sess = Session::new(&fx.store);
        let (plain, _) = forward_vector(
            &sess,
            &v,
            Some(&fx.time),
            &fx.vec_value,
            &fx.mask,
            Some(&fx.intra),
            false,
        )
        .unwrap();
        let sess2 = Session::new(&fx.store);
        let (imputed, _) = forward_vector(
            &sess2,
            &v,
            Some(&fx.time),
            &fx.vec_value,
            &fx.mask,
            Some(&fx.intra),
            true,
        )
        .unwrap();
        assert_eq!(sess.tape.value(plain), sess2.tape.value(imputed));
    }

    #[test]
    fn empty_variable_reduces_to_prompt_token() {
        let mut fx = fixture(5, 2, true);
        fx.intra.zero_residual_contributions(&mut fx.store).unwrap();
        let s = sample(2, vec![obs(0.2, 0, 1.0)]);
        let series = to_series(&s);
        let sess = Session::new(&fx.store);
        let stage = fx.stage();
        let (pooled, _) = forward_series_intra(&sess, &series, 1, &stage, None);
        let got = sess.tape.value(pooled);
        let expect = {
            let sess2 = Session::new(&fx.store);
            let prompt = fx.variables.embed(&sess2, &[1]);
            let ln = sess2.tape.layer_norm(
                prompt,
                sess2.param(&fx.intra.name("final_norm.gain")),
                sess2.param(&fx.intra.name("final_norm.bias")),
                LAYER_NORM_EPS,
            );
            sess2.tape.value(ln)
        };
        assert_eq!(got, expect);
    }

    #[test]
    fn zeroed_intra_pools_final_normalized_inputs() {
        let mut fx = fixture(6, 1, true);
        fx.intra.zero_residual_contributions(&mut fx.store).unwrap();
        let s = sample(1, vec![obs(0.1, 0, 1.0), obs(0.7, 0, -2.0)]);
        let series = to_series(&s);
        let sess = Session::new(&fx.store);
        let stage = fx.stage();
        let (pooled, _) = forward_series_intra(&sess, &series, 0, &stage, None);
        let got = sess.tape.value(pooled);
        let expect = {
            let sess2 = Session::new(&fx.store);
            let prompt = fx.variables.embed(&sess2, &[0]);
            let vals = fx.value.embed(&sess2, &[1.0, -2.0]);
            let z = sess2.tape.concat_rows(&[prompt, vals]);
            let zero = sess2.tape.constant(Array2::zeros((1, D)));
            let te = sess2
                .tape
                .concat_rows(&[zero, fx.time.embed(&sess2, &[0.1, 0.7])]);
            let zin = sess2.tape.add(z, te);
            let ln = sess2.tape.layer_norm(
                zin,
                sess2.param(&fx.intra.name("final_norm.gain")),
                sess2.param(&fx.intra.name("final_norm.bias")),
                LAYER_NORM_EPS,
            );
            let pooled = pool_mean(&sess2, ln, &[true, true, true]);
            sess2.tape.value(pooled)
        };
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_and_unpadded_outputs_agree() {
        let fx = fixture(7, 3, true);
        let s = sample(
            3,
            vec![
                obs(0.1, 0, 1.0),
                obs(0.2, 0, 1.5),
                obs(0.3, 0, -0.5),
                obs(0.15, 1, 2.0),
                obs(0.9, 2, 0.75),
                obs(0.95, 2, 0.5),
            ],
        );
        let series = to_series(&s);
        let stage = fx.stage();
        let sess = Session::new(&fx.store);
        let (plain, _) = forward_series(&sess, &series, &stage, None).unwrap();
        let base = sess.tape.value(plain);
        let sess2 = Session::new(&fx.store);
        let (padded, _) = forward_series(&sess2, &series, &stage, Some(9)).unwrap();
        let pad = sess2.tape.value(padded);
        for (a, b) in base.iter().zip(pad.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn inter_single_row_passthrough_under_zeroed_encoder() {
        let mut fx = fixture(8, 1, true);
        fx.inter.zero_residual_contributions(&mut fx.store).unwrap();
        let sess = Session::new(&fx.store);
        let h = sess
            .tape
            .constant(Array2::from_shape_fn((1, D), |(_, j)| 0.3 * j as f64 - 1.0));
        let (out, _) = forward_series_inter(&sess, h, None, &fx.inter);
        let got = sess.tape.value(out);
        let expect = {
            let sess2 = Session::new(&fx.store);
            let h2 = sess2
                .tape
                .constant(Array2::from_shape_fn((1, D), |(_, j)| 0.3 * j as f64 - 1.0));
            let ln = sess2.tape.layer_norm(
                h2,
                sess2.param(&fx.inter.name("final_norm.gain")),
                sess2.param(&fx.inter.name("final_norm.bias")),
                LAYER_NORM_EPS,
            );
            sess2.tape.value(ln)
        };
        assert_eq!(got, expect);
    }

    #[test]
    fn inter_permuting_rows_with_embeddings_permutes_outputs() {
        let fx = fixture(9, 4, true);
        let sess = Session::new(&fx.store);
        let h_val = Array2::from_shape_fn((4, D), |(i, j)| ((i + 1) * (j + 1)) as f64 * 0.07);
        let h = sess.tape.constant(h_val.clone());
        let ve = fx.variables.embed(&sess, &[0, 1, 2, 3]);
        let mixed = sess.tape.add(h, ve);
        let out = sess.tape.value(fx.inter.encode(&sess, mixed, &[true; 4]));
        // Same rows presented in a permuted order.
        let perm = [3usize, 0, 2, 1];
        let sess2 = Session::new(&fx.store);
        let mut hp = Array2::zeros((4, D));
        for (new, &old) in perm.iter().enumerate() {
            hp.row_mut(new).assign(&h_val.row(old));
        }
        let h2 = sess2.tape.constant(hp);
        let ve2 = fx.variables.embed(&sess2, &perm);
        let mixed2 = sess2.tape.add(h2, ve2);
        let out2 = sess2.tape.value(fx.inter.encode(&sess2, mixed2, &[true; 4]));
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..D {
                let a = out2[[new, j]];
                let b = out[[old, j]];
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn no_va_keeps_stacked_summaries_bit_identical() {
        let fx = fixture(10, 2, true);
        let s = sample(2, vec![obs(0.1, 0, 1.0), obs(0.4, 1, -1.0), obs(0.6, 1, 0.5)]);
        let series = to_series(&s);
        let full_stage = fx.stage();
        let sess = Session::new(&fx.store);
        let (_, acts_full) = forward_series(&sess, &series, &full_stage, None).unwrap();
        let ablated_stage = SeriesStage {
            inter: None,
            inter_variables: None,
            ..fx.stage()
        };
        let sess2 = Session::new(&fx.store);
        let (out_abl, acts_abl) = forward_series(&sess2, &series, &ablated_stage, None).unwrap();
        // The intra stage is untouched by the ablation.
        assert_eq!(
            sess.tape.value(acts_full.stacked),
            sess2.tape.value(acts_abl.stacked)
        );
        // And the ablated output IS the stacked summary matrix.
        assert_eq!(sess2.tape.value(out_abl), sess2.tape.value(acts_abl.stacked));
    }

    #[test]
    fn no_ta_with_zeroed_inter_is_normalized_pooled_embeddings() {
        let mut fx = fixture(11, 2, true);
        fx.inter.zero_residual_contributions(&mut fx.store).unwrap();
        let s = sample(2, vec![obs(0.3, 0, 2.0), obs(0.5, 1, -1.5)]);
        let series = to_series(&s);
        let stage = SeriesStage {
            intra: None,
            ..fx.stage()
        };
        let sess = Session::new(&fx.store);
        let (out, acts) = forward_series(&sess, &series, &stage, None).unwrap();
        let got = sess.tape.value(out);
        let expect = {
            let sess2 = Session::new(&fx.store);
            let stacked = sess2.tape.constant(sess.tape.value(acts.stacked));
            let ve = fx.variables.embed(&sess2, &[0, 1]);
            let mixed = sess2.tape.add(stacked, ve);
            let ln = sess2.tape.layer_norm(
                mixed,
                sess2.param(&fx.inter.name("final_norm.gain")),
                sess2.param(&fx.inter.name("final_norm.bias")),
                LAYER_NORM_EPS,
            );
            sess2.tape.value(ln)
        };
        assert_eq!(got, expect);
    }

    #[test]
    fn timestamp_shift_changes_outputs() {
        let fx = fixture(12, 2, true);
        let a = sample(2, vec![obs(0.2, 0, 1.0), obs(0.5, 1, 2.0)]);
        let mut obs_b = a.observations.clone();
        obs_b[1].t = 0.8;
        let b = Sample::new("s2", 2, obs_b, None, BTreeMap::new()).unwrap();
        let stage = fx.stage();
        let sess = Session::new(&fx.store);
        let (out_a, _) = forward_series(&sess, &to_series(&a), &stage, None).unwrap();
        let sess2 = Session::new(&fx.store);
        let (out_b, _) = forward_series(&sess2, &to_series(&b), &stage, None).unwrap();
        let diff: f64 = sess
            .tape
            .value(out_a)
            .iter()
            .zip(sess2.tape.value(out_b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(diff > 0.0);

        let sess3 = Session::new(&fx.store);
        let (set_a, _) = forward_set(
            &sess3,
            &to_set(&a),
            Some(&fx.time),
            &fx.variables,
            &fx.value,
            Some(&fx.intra),
        )
        .unwrap();
        let sess4 = Session::new(&fx.store);
        let (set_b, _) = forward_set(
            &sess4,
            &to_set(&b),
            Some(&fx.time),
            &fx.variables,
            &fx.value,
            Some(&fx.intra),
        )
        .unwrap();
        let diff_set: f64 = sess3
            .tape
            .value(set_a)
            .iter()
            .zip(sess4.tape.value(set_b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(diff_set > 0.0);
    }

    #[test]
    fn variant_legality_is_validated() {
        let mut cfg = PipelineConfig::new(Representation::Set);
        cfg.variant = Some(Variant::VecImputation);
        assert!(cfg.validate().is_err());
        cfg.representation = Representation::Vector;
        assert!(cfg.validate().is_ok());
        cfg.variant = Some(Variant::SetHierarchy);
        assert!(cfg.validate().is_err());
        cfg.representation = Representation::Set;
        assert!(cfg.validate().is_ok());
    }
}
