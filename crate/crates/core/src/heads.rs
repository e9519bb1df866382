//! Task output layers: a linear softmax classifier and a three-layer
//! ReLU prediction network that consumes [hidden ‖ query time], plus the
//! training losses.
//!
//! The prediction loss is the per-variable double average: variables are
//! weighted equally regardless of how many queries they carry; variables
//! with no queries drop out of the average entirely.

use crate::autodiff::Var;
use crate::params::{ParamError, ParamStore, Session};
use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("feature width {got} does not match head input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("query variable {var} out of range (head covers {n_vars})")]
    QueryVarOutOfRange { var: usize, n_vars: usize },
    #[error("label {label} out of range (n_classes={n_classes})")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("prediction/target length mismatch ({preds} vs {targets})")]
    LengthMismatch { preds: usize, targets: usize },
}

fn linear_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Linear classifier: softmax(features W + b).
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    prefix: String,
    pub in_dim: usize,
    pub n_classes: usize,
}

impl ClassificationHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        store.register(
            &format!("{prefix}.w"),
            linear_init(rng, in_dim, n_classes, in_dim),
            true,
        )?;
        store.register(&format!("{prefix}.b"), Array2::zeros((1, n_classes)), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            in_dim,
            n_classes,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    /// Raw class scores for a 1xF feature row.
    pub fn logits(&self, sess: &Session, features: Var) -> Result<Var, HeadError> {
        let (rows, cols) = sess.tape.shape(features);
        if rows != 1 || cols != self.in_dim {
            return Err(HeadError::WidthMismatch {
                expected: self.in_dim,
                got: cols,
            });
        }
        Ok(sess.tape.add_row(
            sess.tape.matmul(features, sess.param(&self.weight_name())),
            sess.param(&self.bias_name()),
        ))
    }

    /// Class probabilities (softmax over the logits).
    pub fn classify(&self, sess: &Session, features: Var) -> Result<Var, HeadError> {
        Ok(sess.tape.softmax_rows(self.logits(sess, features)?))
    }
}

/// Three-layer prediction network (two hidden ReLU layers of the hidden
/// width) mapping [hidden ‖ t] rows to per-query outputs: one output per
/// variable in pooled mode, a single shared output in series mode.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    prefix: String,
    /// Hidden-feature width D; the network input is D+1 for the query time.
    pub feature_dim: usize,
    pub out_dim: usize,
}

impl PredictionHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let d = feature_dim;
        let input = d + 1;
        store.register(&format!("{prefix}.w1"), linear_init(rng, input, d, input), true)?;
        store.register(&format!("{prefix}.b1"), Array2::zeros((1, d)), true)?;
        store.register(&format!("{prefix}.w2"), linear_init(rng, d, d, d), true)?;
        store.register(&format!("{prefix}.b2"), Array2::zeros((1, d)), true)?;
        store.register(&format!("{prefix}.w3"), linear_init(rng, d, out_dim, d), true)?;
        store.register(&format!("{prefix}.b3"), Array2::zeros((1, out_dim)), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            feature_dim,
            out_dim,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2", "w3", "b3"]
            .iter()
            .map(|s| format!("{}.{s}", self.prefix))
            .collect()
    }

    /// Runs the network over Qx(D+1) rows.
    pub fn forward(&self, sess: &Session, x: Var) -> Result<Var, HeadError> {
        let (_, cols) = sess.tape.shape(x);
        if cols != self.feature_dim + 1 {
            return Err(HeadError::WidthMismatch {
                expected: self.feature_dim + 1,
                got: cols,
            });
        }
        let t = &sess.tape;
        let p = |s: &str| sess.param(&format!("{}.{s}", self.prefix));
        let h1 = t.relu(t.add_row(t.matmul(x, p("w1")), p("b1")));
        let h2 = t.relu(t.add_row(t.matmul(h1, p("w2")), p("b2")));
        Ok(t.add_row(t.matmul(h2, p("w3")), p("b3")))
    }

    /// Pooled-mode prediction: one shared forward pass of [H^o ‖ t_j] rows,
    /// reading output coordinate n_j per query. Returns a Qx1 column.
    pub fn predict_pooled(
        &self,
        sess: &Session,
        pooled: Var,
        queries: &[(f64, usize)],
    ) -> Result<Var, HeadError> {
        for &(_, var) in queries {
            if var >= self.out_dim {
                return Err(HeadError::QueryVarOutOfRange {
                    var,
                    n_vars: self.out_dim,
                });
            }
        }
        let t = &sess.tape;
        let q = queries.len();
        let times = t.constant(Array2::from_shape_vec(
            (q, 1),
            queries.iter().map(|&(time, _)| time).collect(),
        )
        .unwrap());
        let tiled = t.repeat_row(pooled, q);
        let x = t.concat_cols(&[tiled, times]);
        let out = self.forward(sess, x)?;
        let vars: Vec<usize> = queries.iter().map(|&(_, var)| var).collect();
        Ok(t.select_per_row(out, &vars))
    }

    /// Series-mode prediction: a shared scalar-output network applied to
    /// [h^{o,n} ‖ t_j] rows for one variable's queries. Returns a Qx1 column.
    pub fn predict_series(
        &self,
        sess: &Session,
        h_var: Var,
        times: &[f64],
    ) -> Result<Var, HeadError> {
        debug_assert_eq!(self.out_dim, 1, "series mode uses a shared scalar head");
        let t = &sess.tape;
        let q = times.len();
        let t_col = t.constant(Array2::from_shape_vec((q, 1), times.to_vec()).unwrap());
        let tiled = t.repeat_row(h_var, q);
        let x = t.concat_cols(&[tiled, t_col]);
        self.forward(sess, x)
    }
}

/// Per-variable double-average squared error: variables average their own
/// queries, then variables with at least one query average together.
pub fn loss_prediction(per_var: &[Vec<(f64, f64)>]) -> f64 {
    let mut active = 0usize;
    let mut total = 0.0;
    for queries in per_var {
        if queries.is_empty() {
            continue;
        }
        active += 1;
        let sse: f64 = queries.iter().map(|(p, t)| (p - t) * (p - t)).sum();
        total += sse / queries.len() as f64;
    }
    if active == 0 {
        0.0
    } else {
        total / active as f64
    }
}

/// Per-query weights realizing [`loss_prediction`] as a single weighted sum
/// of squared errors: queries of variable n weigh 1 / (N_active * Q_n).
pub fn prediction_loss_weights(q_n: &[usize]) -> Vec<f64> {
    let active = q_n.iter().filter(|&&q| q > 0).count().max(1) as f64;
    q_n.iter()
        .map(|&q| if q == 0 { 0.0 } else { 1.0 / (active * q as f64) })
        .collect()
}

/// Cross-entropy of a probability vector against the true label.
pub fn loss_classification(probabilities: &[f64], label: usize) -> Result<f64, HeadError> {
    if label >= probabilities.len() {
        return Err(HeadError::LabelOutOfRange {
            label,
            n_classes: probabilities.len(),
        });
    }
    Ok(-probabilities[label].ln())
}
