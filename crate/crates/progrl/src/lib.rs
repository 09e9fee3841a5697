//! Learning-from-progress on a miniature roguelike.
//!
//! The crate has three layers:
//!
//! * a small differentiable-network core (`nd`, `layers`, `params`, `loss`,
//!   `gradcheck`, `ckpt`) — plain structs, hand-written backward passes,
//!   generic over the scalar type;
//! * the environment and data plane (`env`, `demos`, `encode`) — a
//!   deterministic multi-level grid roguelike, scripted experts, a binary
//!   demonstration format, and the temporal-offset samplers;
//! * the learning pipeline (`pretrain`, `progress`, `agent`, `oracle`,
//!   `harness`) — contrastive encoder pretraining, a temporal-progress
//!   reward model, an advantage actor-critic fine-tuner, exact tabular
//!   cross-checks, and a seeded experiment runner.

pub mod agent;
pub mod ckpt;
pub mod demos;
pub mod encode;
pub mod env;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod nd;
pub mod oracle;
pub mod params;
pub mod pretrain;
pub mod progress;
pub mod scalar;
pub mod stats;

/// Concrete scalar used by every model in the pipeline. The numeric core is
/// generic over [`scalar::Scalar`]; 64-bit floats give finite-difference
/// tests enough headroom to pin tight tolerances.
pub type Real = f64;

/// Concrete array type used by the pipeline.
pub type Tensor = nd::NdArray<Real>;
