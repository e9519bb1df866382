//! Named parameter storage shared by embedders, encoders, and heads.
//!
//! A [`ParamStore`] maps parameter names to dense matrices plus a trainable
//! flag. A [`Session`] binds a store to one [`Tape`]: trainable parameters
//! enter the tape as grad-tracked leaves, frozen ones as constants, so frozen
//! weights never pay for weight gradients. [`Adam`] updates trainable entries
//! in name order for cross-run determinism.

use crate::autodiff::{Tape, Var};
use ndarray::Array2;
use std::cell::RefCell;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter `{0}` is already registered")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

#[derive(Debug, Clone)]
struct Param {
    value: Array2<f64>,
    trainable: bool,
}

/// Name-keyed parameter matrices with per-parameter freeze tags.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> Result<(), ParamError> {
        if self.map.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.map.insert(name.to_string(), Param { value, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>, ParamError> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<(), ParamError> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if p.value.dim() != value.dim() {
            return Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected: p.value.dim(),
                got: value.dim(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool, ParamError> {
        self.map
            .get(name)
            .map(|p| p.trainable)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    /// Parameter names in deterministic (lexicographic) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn n_trainable_values(&self) -> usize {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies of all trainable tensors, keyed by name.
    pub fn trainable_snapshot(&self) -> BTreeMap<String, Array2<f64>> {
        self.map
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    pub fn restore_snapshot(&mut self, snapshot: &BTreeMap<String, Array2<f64>>) -> Result<(), ParamError> {
        for (name, value) in snapshot {
            self.set(name, value.clone())?;
        }
        Ok(())
    }

    /// FNV-1a hash over the raw little-endian bytes of every frozen tensor,
    /// in name order. Bit-identical frozen parameters hash identically.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.map {
            if p.trainable {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in p.value.iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// One forward/backward pass: a tape plus the parameter bindings made on it.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Binds a parameter into the tape (once per session). Trainable
    /// parameters become grad-tracked leaves, frozen ones constants.
    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("unknown parameter `{name}`"))
            .clone();
        let trainable = self.store.is_trainable(name).unwrap();
        let var = if trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Runs backward from `loss` and returns gradients for every trainable
    /// parameter that was bound and reached by the loss.
    pub fn grads(&self, loss: Var) -> BTreeMap<String, Array2<f64>> {
        let grads = self.tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, var) in self.bound.borrow().iter() {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Accumulates per-parameter gradients across samples of one batch.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sums: BTreeMap<String, Array2<f64>>,
    pub count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: BTreeMap<String, Array2<f64>>) {
        for (name, g) in grads {
            match self.sums.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.sums.insert(name, g);
                }
            }
        }
        self.count += 1;
    }

    /// Mean gradients over the accumulated samples.
    pub fn mean(mut self) -> BTreeMap<String, Array2<f64>> {
        let k = self.count.max(1) as f64;
        for g in self.sums.values_mut() {
            *g /= k;
        }
        self.sums
    }
}

/// Adam with bias correction. Only trainable parameters are updated; a
/// parameter absent from the gradient map is left untouched (its moment
/// state does not advance).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) -> Result<(), ParamError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if !store.is_trainable(name)? {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mut value = store.get(name)?.clone();
            for ((val, mv), vv) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(name, value)?;
        }
        Ok(())
    }
}
