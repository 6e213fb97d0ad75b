//! Decentralized momentum SGD with random agent activation, Top-k sparsified
//! gossip and Gaussian differential privacy.
//!
//! The numerical kernels ([`compress`], [`bounds`] and the per-agent update in
//! [`engine`]) are generic over [`Scalar`]; the aliases below fix them to
//! `f64`, which is what the simulator and experiment runner use.

pub mod bounds;
pub mod compress;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod privacy;
pub mod problems;
pub mod rng;
mod scalar;

pub use error::{Error, Result, Stage};
pub use scalar::Scalar;

pub type SparseUpdate = compress::SparseUpdate<f64>;
pub type AgentState = engine::AgentState<f64>;
pub type StepParams = engine::StepParams<f64>;
pub type BoundInputs = bounds::BoundInputs<f64>;
pub type StepTuning = bounds::StepTuning<f64>;

pub type SparseUpdateF32 = compress::SparseUpdate<f32>;
pub type AgentStateF32 = engine::AgentState<f32>;
pub type BoundInputsF32 = bounds::BoundInputs<f32>;
