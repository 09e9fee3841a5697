//! Checkpoint serialization.
//!
//! A checkpoint is a single JSON document:
//!
//! ```json
//! {
//!   "format": "progrl-ckpt",
//!   "version": 1,
//!   "rng_seed": 17,
//!   "params": { "torso.c1.w": { "shape": [8, 81], "data": [ ... ] }, ... }
//! }
//! ```
//!
//! Parameter order follows the store's insertion order, values are written
//! with shortest-round-trip decimal formatting, so save → load → save
//! reproduces the file byte for byte and every value exactly.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nd::NdArray;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const CKPT_FORMAT: &str = "progrl-ckpt";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unrecognized checkpoint format `{found}` (expected `{CKPT_FORMAT}`)")]
    BadFormat { found: String },
    #[error("unsupported checkpoint version {found} (expected {CKPT_VERSION})")]
    BadVersion { found: u32 },
    #[error("parameter `{name}`: shape {shape:?} does not match {len} data values")]
    ShapeMismatch { name: String, shape: Vec<usize>, len: usize },
    #[error("parameter `{name}` holds a non-finite value and cannot be serialized")]
    NonFinite { name: String },
    #[error("checkpoint is missing parameter `{name}`")]
    MissingParam { name: String },
}

#[derive(Serialize, Deserialize)]
struct CkptDoc {
    format: String,
    version: u32,
    rng_seed: u64,
    params: IndexMap<String, CkptParam>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// In-memory checkpoint: named arrays plus the seed the producer ran with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub rng_seed: u64,
    pub params: IndexMap<String, NdArray<f64>>,
}

impl Checkpoint {
    /// Capture the values of a parameter store.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, rng_seed: u64) -> Self {
        let mut params = IndexMap::new();
        for (name, value) in store.iter() {
            let data: Vec<f64> = value.data().iter().map(|v| v.to_f64_lossy()).collect();
            params.insert(name.to_string(), NdArray::from_vec(value.shape(), data));
        }
        Self { rng_seed, params }
    }

    /// Fetch one parameter, or a structured error naming it.
    pub fn get(&self, name: &str) -> Result<&NdArray<f64>, CkptError> {
        self.params
            .get(name)
            .ok_or_else(|| CkptError::MissingParam { name: name.to_string() })
    }

    /// Rebuild a parameter store (optimizer moments start at zero).
    pub fn into_store<T: Scalar>(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, value) in &self.params {
            let data: Vec<T> = value.data().iter().map(|&v| T::from_f64_lossy(v)).collect();
            store.insert(name, NdArray::from_vec(value.shape(), data));
        }
        store
    }

    /// Serialize to the JSON text format.
    pub fn to_json(&self) -> Result<String, CkptError> {
        let mut params = IndexMap::new();
        for (name, value) in &self.params {
            if !value.all_finite() {
                return Err(CkptError::NonFinite { name: name.clone() });
            }
            params.insert(
                name.clone(),
                CkptParam { shape: value.shape().to_vec(), data: value.data().to_vec() },
            );
        }
        let doc = CkptDoc {
            format: CKPT_FORMAT.to_string(),
            version: CKPT_VERSION,
            rng_seed: self.rng_seed,
            params,
        };
        Ok(serde_json::to_string_pretty(&doc).expect("checkpoint document serializes"))
    }

    /// Parse the JSON text format.
    pub fn from_json(text: &str) -> Result<Self, CkptError> {
        let doc: CkptDoc = serde_json::from_str(text)?;
        if doc.format != CKPT_FORMAT {
            return Err(CkptError::BadFormat { found: doc.format });
        }
        if doc.version != CKPT_VERSION {
            return Err(CkptError::BadVersion { found: doc.version });
        }
        let mut params = IndexMap::new();
        for (name, p) in doc.params {
            let want: usize = p.shape.iter().product();
            if want != p.data.len() {
                return Err(CkptError::ShapeMismatch {
                    name,
                    shape: p.shape,
                    len: p.data.len(),
                });
            }
            params.insert(name, NdArray::from_vec(&p.shape, p.data));
        }
        Ok(Self { rng_seed: doc.rng_seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CkptError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
