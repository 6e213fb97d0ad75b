//! The decentralized update rule and the synchronous multi-agent simulator.
//!
//! Each round every agent flips a `Bern(p)` coin. Active agents sample one
//! local record, clip its gradient, perturb it with Gaussian noise, take a
//! momentum step plus a gossip correction computed from public replicas, and
//! broadcast the Top-k part of how far their iterate has drifted from its
//! public replica. Inactive agents only decay their momentum and gossip.
//! After a barrier every agent advances the replicas of all senders it can
//! hear, itself included.

mod agent;
mod metrics;
mod sim;

pub use agent::{agent_step, replica_apply, AgentState, LocalUpdate, StepOutput, StepParams};
pub use metrics::{Record, RunMetrics};
pub use sim::{IterationTrace, Simulation, Stepper};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::check_activation;

/// Parameters of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// SGD step size.
    pub alpha: f64,
    /// Consensus step size.
    pub gamma: f64,
    /// Momentum factor in `(0, 1)`.
    pub beta: f64,
    /// Activation probability in `[1/2, 1]`.
    pub p: f64,
    /// Coordinates kept by Top-k.
    pub k: usize,
    pub iterations: u64,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Gradient clipping scale `G`; coordinates are clamped to `G / sqrt(d)`.
    pub clip: f64,
    pub seed: u64,
    /// Shared initial iterate; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Record metrics every `stride` iterations (the final iteration is always recorded).
    #[serde(default = "default_stride")]
    pub stride: u64,
    /// Measure the per-agent gradient deviation at each recorded iteration.
    #[serde(default)]
    pub track_deviation: bool,
}

fn default_stride() -> u64 {
    1
}

impl RunConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(name, format!("must be positive and finite, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("gamma", self.gamma)?;
        positive("clip", self.clip)?;
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::domain("beta", format!("must lie in (0, 1), got {}", self.beta)));
        }
        check_activation(self.p)?;
        if self.k == 0 || self.k > d {
            return Err(Error::domain("k", format!("need 1 <= k <= d, got k = {}, d = {d}", self.k)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::domain("sigma", format!("must be finite and non-negative, got {}", self.sigma)));
        }
        if self.stride == 0 {
            return Err(Error::domain("stride", "must be at least 1"));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != d {
                return Err(Error::Dimension { expected: d, got: x0.len() });
            }
        }
        Ok(())
    }
}

/// `eta ~ Bern(p)` from the given stream.
pub fn activation_draw<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random_bool(p)
}

/// Consensus step size
/// `gamma = rho p k / (d (16 rho + rho^2 + 4 phi^2 + 2 rho phi^2) - 8 rho p k)`.
pub fn recommended_gamma(rho: f64, phi: f64, p: f64, k: usize, d: usize) -> Result<f64> {
    let pk = p * k as f64;
    let denom = d as f64 * (16.0 * rho + rho * rho + 4.0 * phi * phi + 2.0 * rho * phi * phi) - 8.0 * rho * pk;
    if !(denom > 0.0) {
        return Err(Error::domain("gamma", format!("denominator {denom} is not positive")));
    }
    Ok(rho * pk / denom)
}
