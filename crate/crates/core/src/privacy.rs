//! Gaussian noise calibration and privacy accounting.
//!
//! [`calibrate_sigma`] returns the smallest noise level meeting the
//! closed-form requirement
//! `sigma^2 >= 160 k p^2 T log(1.25/delta0) G^2 / (q^2 d eps^2)`.
//! [`verify_budget`] checks a budget independently by replaying the accounting
//! chain: Gaussian mechanism on the sparsified gradient, amplification by
//! agent activation and data subsampling, advanced composition over `T`
//! rounds, then post-processing. All logarithms are natural.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::scalar::Scalar;

/// Largest per-round epsilon for which advanced composition applies.
pub const COMPOSITION_EPS_MAX: f64 = 0.9;
/// Per-step `eps_t^2` ceiling under which the linear amplification bound holds.
pub const LINEAR_REGIME_EPS_SQ: f64 = 0.2;

/// Inputs to noise calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Target epsilon in `(0, 1]`.
    pub epsilon: f64,
    /// Per-step Gaussian-mechanism delta in `(0, 1]`.
    pub delta0: f64,
    pub iterations: u64,
    /// Activation probability in `[1/2, 1]`.
    pub p: f64,
    /// Local dataset size.
    pub q: usize,
    pub k: usize,
    pub d: usize,
    /// Gradient scale (clipping bound).
    pub g: f64,
}

impl PrivacyParams {
    /// Smallest `T` with `T >= q^2 eps^2 / (4 p^2)`.
    pub fn min_iterations(&self) -> u64 {
        let q = self.q as f64;
        (q * q * self.epsilon * self.epsilon / (4.0 * self.p * self.p)).ceil() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::domain("epsilon", format!("must lie in (0, 1], got {}", self.epsilon)));
        }
        if !(self.delta0 > 0.0 && self.delta0 <= 1.0) {
            return Err(Error::domain("delta0", format!("must lie in (0, 1], got {}", self.delta0)));
        }
        check_activation(self.p)?;
        if self.q == 0 {
            return Err(Error::domain("q", "local dataset size must be positive"));
        }
        if self.k == 0 || self.k > self.d {
            return Err(Error::domain("k", format!("need 1 <= k <= d, got k = {}, d = {}", self.k, self.d)));
        }
        if !(self.g > 0.0 && self.g.is_finite()) {
            return Err(Error::domain("G", format!("must be positive and finite, got {}", self.g)));
        }
        let q = self.q as f64;
        let required = q * q * self.epsilon * self.epsilon / (4.0 * self.p * self.p);
        if (self.iterations as f64) < required {
            return Err(Error::TooFewIterations { iterations: self.iterations, minimum: self.min_iterations() });
        }
        Ok(())
    }
}

pub(crate) fn check_activation(p: f64) -> Result<()> {
    if !(0.5..=1.0).contains(&p) {
        return Err(Error::domain("p", format!("activation probability must lie in [1/2, 1], got {p}")));
    }
    Ok(())
}

/// Calibrated budget: parameters plus the noise standard deviation in use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    #[serde(flatten)]
    pub params: PrivacyParams,
    pub sigma: f64,
}

impl PrivacyBudget {
    pub fn calibrated(params: PrivacyParams) -> Result<Self> {
        let sigma = calibrate_sigma(&params)?;
        Ok(Self { params, sigma })
    }

    pub fn with_sigma(params: PrivacyParams, sigma: f64) -> Self {
        Self { params, sigma }
    }
}

/// L2 sensitivity `2 G sqrt(k/d)` of a Top-k-selected clipped gradient.
pub fn gaussian_sensitivity(k: usize, d: usize, g: f64) -> Result<f64> {
    if k == 0 || k > d {
        return Err(Error::domain("k", format!("need 1 <= k <= d, got k = {k}, d = {d}")));
    }
    if !(g > 0.0) {
        return Err(Error::domain("G", format!("must be positive, got {g}")));
    }
    Ok(2.0 * g * (k as f64 / d as f64).sqrt())
}

/// Minimal sigma satisfying the calibration inequality with equality.
pub fn calibrate_sigma(params: &PrivacyParams) -> Result<f64> {
    params.validate()?;
    let PrivacyParams { epsilon, delta0, iterations, p, q, k, d, g } = *params;
    let q = q as f64;
    let var = 160.0 * k as f64 * p * p * iterations as f64 * (1.25 / delta0).ln() * g * g
        / (q * q * d as f64 * epsilon * epsilon);
    Ok(var.sqrt())
}

/// Per-round epsilon of the Gaussian mechanism on the sparsified gradient:
/// `2 sqrt(2 k log(1.25/delta0)) G / (sigma sqrt(d))`.
pub fn per_step_epsilon(sigma: f64, k: usize, d: usize, delta0: f64, g: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain("sigma", format!("must be positive, got {sigma}")));
    }
    if !(delta0 > 0.0 && delta0 <= 1.0) {
        return Err(Error::domain("delta0", format!("must lie in (0, 1], got {delta0}")));
    }
    let delta = gaussian_sensitivity(k, d, g)?;
    Ok((2.0 * (1.25 / delta0).ln()).sqrt() * delta / sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplificationMode {
    /// `log(1 + p (e^eps - 1) / q)`
    Exact,
    /// `2 p eps / q`, valid while `eps^2 <= 1/5`.
    Linearized,
}

/// Privacy amplification from activating each agent with probability `p` and
/// sampling one of `q` local records.
pub fn amplify_by_subsampling(eps: f64, p: f64, q: usize, mode: AmplificationMode) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::domain("epsilon", format!("must be non-negative, got {eps}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain("p", format!("must lie in (0, 1], got {p}")));
    }
    if q == 0 {
        return Err(Error::domain("q", "must be at least 1"));
    }
    let q = q as f64;
    match mode {
        AmplificationMode::Exact => Ok((p * eps.exp_m1() / q).ln_1p()),
        AmplificationMode::Linearized => {
            if eps * eps > LINEAR_REGIME_EPS_SQ {
                return Err(Error::domain(
                    "epsilon",
                    format!("linearized amplification needs eps^2 <= 1/5, got eps = {eps}"),
                ));
            }
            Ok(2.0 * p * eps / q)
        }
    }
}

/// Companion delta mapping of the subsampling amplification.
pub fn amplify_delta(delta: f64, p: f64, q: usize) -> f64 {
    p * delta / q as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub epsilon: f64,
    pub delta: f64,
}

/// Advanced composition of heterogeneous `(eps_t, delta_t)` mechanisms:
/// `eps = sqrt(2 S log(e + sqrt(S)/delta')) + S` with `S = sum eps_t^2`, and
/// `delta = 1 - (1 - delta') prod (1 - delta_t)`.
pub fn compose_advanced(eps: &[f64], deltas: &[f64], delta_prime: f64) -> Result<Composition> {
    if eps.len() != deltas.len() {
        return Err(Error::Dimension { expected: eps.len(), got: deltas.len() });
    }
    if let Some(e) = eps.iter().find(|e| !(**e >= 0.0 && **e <= COMPOSITION_EPS_MAX)) {
        return Err(Error::domain("epsilon", format!("per-round epsilon {e} outside (0, 0.9]")));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(Error::domain("delta", format!("per-round delta {d} outside (0, 1]")));
    }
    if !(delta_prime > 0.0 && delta_prime <= 1.0) {
        return Err(Error::domain("delta_prime", format!("must lie in (0, 1], got {delta_prime}")));
    }
    let s: f64 = eps.iter().map(|e| e * e).sum();
    let epsilon = (2.0 * s * (std::f64::consts::E + s.sqrt() / delta_prime).ln()).sqrt() + s;
    // 1 - (1-delta') prod(1-delta_t), evaluated in log space to keep tiny deltas.
    let log_keep = (-delta_prime).ln_1p() + deltas.iter().map(|d| (-d).ln_1p()).sum::<f64>();
    let delta = -log_keep.exp_m1();
    Ok(Composition { epsilon, delta })
}

/// Every stage of a replayed accounting chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingLedger {
    pub per_step_eps: f64,
    pub per_step_delta: f64,
    pub amplified_eps: f64,
    pub amplified_delta: f64,
    /// `sum_t eps'_t^2`
    pub amplified_sq_sum: f64,
    pub delta_prime: f64,
    pub composed_eps: f64,
    pub composed_delta: f64,
    pub target_eps: f64,
}

impl AccountingLedger {
    /// One line per stage: `stage epsilon delta`.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("per_step", self.per_step_eps, self.per_step_delta),
            ("amplified", self.amplified_eps, self.amplified_delta),
            ("composed", self.composed_eps, self.composed_delta),
            ("post_processed", self.composed_eps, self.composed_delta),
        ];
        for (stage, eps, delta) in rows {
            let _ = writeln!(out, "{stage:<15} {eps:.6e} {delta:.6e}");
        }
        out
    }
}

/// Replays the accounting chain for `budget` and checks the composed epsilon
/// against the target. The post-processing stage leaves the guarantee
/// unchanged because messages are functions of the perturbed gradients.
pub fn verify_budget(budget: &PrivacyBudget) -> Result<AccountingLedger> {
    let params = &budget.params;
    params.validate().map_err(|e| Error::Verification { stage: Stage::Precondition, detail: e.to_string() })?;
    let eps_t = per_step_epsilon(budget.sigma, params.k, params.d, params.delta0, params.g)
        .map_err(|e| Error::Verification { stage: Stage::PerStep, detail: e.to_string() })?;
    if eps_t * eps_t > LINEAR_REGIME_EPS_SQ {
        return Err(Error::Verification {
            stage: Stage::PerStep,
            detail: format!("eps_t^2 = {:.6} exceeds 1/5", eps_t * eps_t),
        });
    }
    let eps_amp = amplify_by_subsampling(eps_t, params.p, params.q, AmplificationMode::Linearized)
        .map_err(|e| Error::Verification { stage: Stage::Amplification, detail: e.to_string() })?;
    if eps_amp > COMPOSITION_EPS_MAX {
        return Err(Error::Verification {
            stage: Stage::Amplification,
            detail: format!("amplified eps' = {eps_amp:.6} exceeds 0.9"),
        });
    }
    let delta_amp = amplify_delta(params.delta0, params.p, params.q);
    let t = params.iterations as usize;
    let sq_sum = t as f64 * eps_amp * eps_amp;
    if sq_sum > 1.0 {
        return Err(Error::Verification {
            stage: Stage::Composition,
            detail: format!("sum of squared amplified eps = {sq_sum:.6} exceeds 1"),
        });
    }
    let delta_prime = sq_sum.sqrt();
    let composed = compose_advanced(&vec![eps_amp; t], &vec![delta_amp; t], delta_prime)
        .map_err(|e| Error::Verification { stage: Stage::Composition, detail: e.to_string() })?;
    if composed.epsilon > params.epsilon {
        return Err(Error::Verification {
            stage: Stage::Composition,
            detail: format!("composed eps = {:.6} exceeds target {}", composed.epsilon, params.epsilon),
        });
    }
    Ok(AccountingLedger {
        per_step_eps: eps_t,
        per_step_delta: params.delta0,
        amplified_eps: eps_amp,
        amplified_delta: delta_amp,
        amplified_sq_sum: sq_sum,
        delta_prime,
        composed_eps: composed.epsilon,
        composed_delta: composed.delta,
        target_eps: params.epsilon,
    })
}

/// Noise-variance reduction `k p^2 / d` relative to full-dimension,
/// always-active communication.
pub fn noise_reduction_ratio(k: usize, d: usize, p: f64) -> f64 {
    k as f64 * p * p / d as f64
}

/// I.i.d. `N(0, sigma^2)` coordinates drawn from `rng`.
pub fn sample_gaussian_noise<T: Scalar, R: Rng + ?Sized>(d: usize, sigma: f64, rng: &mut R) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    fill_gaussian_noise(&mut out, sigma, rng);
    out
}

pub fn fill_gaussian_noise<T: Scalar, R: Rng + ?Sized>(out: &mut [T], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        out.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = T::of(sigma * z);
    }
}
