//! Named parameter storage and the Adam update rule.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use thiserror::Error;

use crate::nd::NdArray;
use crate::scalar::Scalar;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
        }
    }
}

/// One parameter array plus its Adam moment buffers.
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: NdArray<T>,
    m: NdArray<T>,
    v: NdArray<T>,
    step: u64,
}

impl<T: Scalar> ParamEntry<T> {
    fn new(value: NdArray<T>) -> Self {
        let m = NdArray::zeros(value.shape());
        let v = NdArray::zeros(value.shape());
        Self { value, m, v, step: 0 }
    }
}

/// Gradient accumulator keyed by parameter name (insertion-ordered).
#[derive(Clone, Debug, Default)]
pub struct Grads<T> {
    map: IndexMap<String, NdArray<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    /// Add `g` into the accumulated gradient for `name`.
    pub fn accumulate(&mut self, name: &str, g: NdArray<T>) {
        match self.map.get_mut(name) {
            Some(acc) => {
                assert_eq!(acc.shape(), g.shape(), "gradient shape changed for {name}");
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("gradient for unknown parameter `{name}`")]
    UnknownParam { name: String },
    #[error("gradient shape {got:?} does not match parameter `{name}` shape {want:?}")]
    ShapeMismatch { name: String, want: Vec<usize>, got: Vec<usize> },
}

/// Insertion-ordered map of named parameters with per-entry Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new(), frozen: BTreeSet::new() }
    }

    /// Insert a parameter. Panics on duplicate names: layer wiring is static.
    pub fn insert(&mut self, name: &str, value: NdArray<T>) {
        let prev = self.entries.insert(name.to_string(), ParamEntry::new(value));
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> &NdArray<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut NdArray<T> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    /// Frozen parameters are skipped by [`ParamStore::adam_step`].
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        assert!(!names.is_empty(), "freeze_prefix `{prefix}` matched no parameters");
        self.frozen.extend(names);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    /// Bias-corrected Adam update over every non-frozen parameter that has a
    /// gradient. Parameters without gradients (and frozen ones) are left
    /// untouched, moments included.
    pub fn adam_step(&mut self, grads: &Grads<T>, cfg: &AdamConfig<T>) -> Result<(), OptimError> {
        for (name, g) in grads.iter() {
            if !self.entries.contains_key(name) {
                return Err(OptimError::UnknownParam { name: name.to_string() });
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGrad { name: name.to_string() });
            }
        }
        let one = T::one();
        for (name, entry) in self.entries.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != entry.value.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    want: entry.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            entry.step += 1;
            let t = entry.step as i32;
            let bc1 = one - cfg.beta1.powi(t);
            let bc2 = one - cfg.beta2.powi(t);
            let val = entry.value.data_mut();
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            for i in 0..val.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (one - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (one - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                val[i] = val[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            debug_assert!(entry.value.all_finite(), "parameter `{name}` went non-finite");
        }
        Ok(())
    }
}
