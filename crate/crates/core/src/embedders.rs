//! Trainable input embedders that align irregular series to the encoder's
//! vector space: a continuous-time embedder (linear first coordinate,
//! learnable sinusoids elsewhere), a variable lookup table, and bias-free
//! linear value/mask embedders.

use crate::autodiff::Var;
use crate::params::{ParamError, ParamStore, Session};
use ndarray::Array2;
use rand::Rng;

/// Frequencies cover up to this many cycles per normalized window at init.
pub const INIT_MAX_CYCLES: f64 = 10.0;

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

/// Small symmetric uniform init scaled by 1/sqrt(width), for linear maps.
fn linear_init(rng: &mut impl Rng, rows: usize, cols: usize, dim: usize) -> Array2<f64> {
    let bound = 1.0 / (dim as f64).sqrt();
    uniform_matrix(rng, rows, cols, -bound, bound)
}

/// Continuous-time embedder: coordinate 0 is `omega_0 * t + alpha_0`,
/// coordinates 0 < d < D are `sin(omega_d * t + alpha_d)`.
#[derive(Debug, Clone)]
pub struct TimeEmbedder {
    prefix: String,
    pub dim: usize,
}

impl TimeEmbedder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        assert!(dim >= 2, "time embedder needs D >= 2");
        let two_pi = 2.0 * std::f64::consts::PI;
        let omega = uniform_matrix(rng, 1, dim, 0.0, two_pi * INIT_MAX_CYCLES);
        let alpha = uniform_matrix(rng, 1, dim, 0.0, two_pi);
        store.register(&format!("{prefix}.omega"), omega, true)?;
        store.register(&format!("{prefix}.alpha"), alpha, true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            dim,
        })
    }

    pub fn omega_name(&self) -> String {
        format!("{}.omega", self.prefix)
    }

    pub fn alpha_name(&self) -> String {
        format!("{}.alpha", self.prefix)
    }

    /// Embeds a batch of times into an SxD matrix.
    pub fn embed(&self, sess: &Session, times: &[f64]) -> Var {
        assert!(!times.is_empty(), "embed_time needs at least one time");
        let t_col = sess
            .tape
            .constant(Array2::from_shape_vec((times.len(), 1), times.to_vec()).unwrap());
        let omega = sess.param(&self.omega_name());
        let alpha = sess.param(&self.alpha_name());
        let affine = sess.tape.add_row(sess.tape.matmul(t_col, omega), alpha);
        let linear = sess.tape.slice_cols(affine, 0, 1);
        let periodic = sess.tape.sin(sess.tape.slice_cols(affine, 1, self.dim - 1));
        sess.tape.concat_cols(&[linear, periodic])
    }
}

/// Learnable per-variable embedding lookup table (NxD).
#[derive(Debug, Clone)]
pub struct VariableEmbedder {
    prefix: String,
    pub n_vars: usize,
    pub dim: usize,
}

impl VariableEmbedder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        n_vars: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        store.register(&format!("{prefix}.table"), linear_init(rng, n_vars, dim, dim), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            n_vars,
            dim,
        })
    }

    pub fn table_name(&self) -> String {
        format!("{}.table", self.prefix)
    }

    /// Looks up rows for the given variable indices.
    pub fn embed(&self, sess: &Session, vars: &[usize]) -> Var {
        for &v in vars {
            assert!(v < self.n_vars, "variable index {v} out of range");
        }
        let table = sess.param(&self.table_name());
        sess.tape.gather_rows(table, vars)
    }
}

/// Bias-free linear embedder for scalar values (set/series pipelines):
/// x -> x * W with W of shape 1xD.
#[derive(Debug, Clone)]
pub struct ValueEmbedder {
    prefix: String,
    pub dim: usize,
}

impl ValueEmbedder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        store.register(&format!("{prefix}.w"), linear_init(rng, 1, dim, dim), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            dim,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    /// Embeds a batch of scalars into an SxD matrix.
    pub fn embed(&self, sess: &Session, values: &[f64]) -> Var {
        let col = sess
            .tape
            .constant(Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap());
        sess.tape.matmul(col, sess.param(&self.weight_name()))
    }
}

/// Bias-free linear embedder for per-timestamp value vectors (vector
/// pipeline): x_l -> x_l * W with W of shape NxD.
#[derive(Debug, Clone)]
pub struct VectorValueEmbedder {
    prefix: String,
    pub n_vars: usize,
    pub dim: usize,
}

impl VectorValueEmbedder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        n_vars: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        store.register(&format!("{prefix}.w"), linear_init(rng, n_vars, dim, dim), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            n_vars,
            dim,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    /// Embeds an LxN matrix of (zero-filled) values into LxD.
    pub fn embed(&self, sess: &Session, rows: &Array2<f64>) -> Var {
        assert_eq!(rows.ncols(), self.n_vars);
        let x = sess.tape.constant(rows.clone());
        sess.tape.matmul(x, sess.param(&self.weight_name()))
    }
}

/// Bias-free linear embedder for per-timestamp observation masks.
#[derive(Debug, Clone)]
pub struct MaskEmbedder {
    prefix: String,
    pub n_vars: usize,
    pub dim: usize,
}

impl MaskEmbedder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        n_vars: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        store.register(&format!("{prefix}.w"), linear_init(rng, n_vars, dim, dim), true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            n_vars,
            dim,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    /// Embeds an LxN 0/1 mask matrix into LxD.
    pub fn embed(&self, sess: &Session, mask: &Array2<f64>) -> Var {
        assert_eq!(mask.ncols(), self.n_vars);
        debug_assert!(mask.iter().all(|&m| m == 0.0 || m == 1.0));
        let m = sess.tape.constant(mask.clone());
        sess.tape.matmul(m, sess.param(&self.weight_name()))
    }
}
