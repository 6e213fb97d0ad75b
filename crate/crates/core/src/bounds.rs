//! Closed-form evaluators for the momentum, consensus and stationarity bounds.

use serde::{Deserialize, Serialize};

use crate::engine::recommended_gamma;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Everything the stationarity bound depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs<T> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    pub p: T,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub iterations: u64,
    pub sigma: T,
    /// Clipping scale `G`.
    pub g: T,
    /// Gradient dissimilarity `varsigma`.
    pub varsigma: T,
    /// Smoothness `L`.
    pub smoothness: T,
    pub rho: T,
    pub phi: T,
    /// `f(x0) - f*`
    pub f0_gap: T,
}

fn pow2<T: Scalar>(v: T) -> T {
    v * v
}

/// `E||m||^2 <= p (G^2 + sigma^2 d) / (1 - beta)^2`.
pub fn momentum_bound<T: Scalar>(p: T, g: T, sigma: T, d: usize, beta: T) -> T {
    p * (g * g + sigma * sigma * T::of(d as f64)) / pow2(T::one() - beta)
}

/// `c = rho^2 p k / (82 d)`.
pub fn consensus_constant<T: Scalar>(rho: T, p: T, k: usize, d: usize) -> T {
    rho * rho * p * T::of(k as f64) / (T::of(82.0) * T::of(d as f64))
}

/// `sum_i E||x_bar - x_i||^2 <= 8 p alpha^2 (G^2 + sigma^2 d) n / (c^2 (1 - beta)^2)`.
#[allow(clippy::too_many_arguments)]
pub fn consensus_bound<T: Scalar>(alpha: T, p: T, g: T, sigma: T, d: usize, n: usize, beta: T, rho: T, k: usize) -> T {
    let c = consensus_constant(rho, p, k, d);
    T::of(8.0) * p * alpha * alpha * (g * g + sigma * sigma * T::of(d as f64)) * T::of(n as f64)
        / (c * c * pow2(T::one() - beta))
}

/// Coefficients of the stationarity bound written as `r0 / (alpha T) + b alpha + h alpha^2`,
/// plus the inverse step cap `2L / (1 - beta)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTuning<T> {
    pub r0: T,
    pub b: T,
    pub h: T,
    pub inv_cap: T,
}

impl<T: Scalar> StepTuning<T> {
    pub fn new(inputs: &BoundInputs<T>) -> Self {
        let one = T::one();
        let i = inputs;
        let d = T::of(i.d as f64);
        let n = T::of(i.n as f64);
        let omb = one - i.beta;
        let c = consensus_constant(i.rho, i.p, i.k, i.d);
        let noise = i.g * i.g + i.sigma * i.sigma * d;
        Self {
            r0: T::of(2.0) * omb * i.f0_gap / i.p,
            b: i.smoothness * (i.beta + T::of(2.0) + T::of(4.0) * i.beta * i.beta * i.p)
                * (noise + i.varsigma * i.varsigma)
                / (n * omb * omb * omb),
            h: T::of(8.0) * i.p * noise * i.smoothness * i.smoothness / (omb * omb * c * c),
            inv_cap: T::of(2.0) * i.smoothness / (omb * omb),
        }
    }

    /// `r0 / (alpha (T+1)) + b alpha + h alpha^2`.
    pub fn objective(&self, alpha: T, iterations: u64) -> T {
        let t1 = T::of(iterations as f64 + 1.0);
        self.r0 / (alpha * t1) + self.b * alpha + self.h * alpha * alpha
    }

    /// `min{ (r0 / (b (T+1)))^(1/2), (r0 / (h (T+1)))^(1/3), 1 / inv_cap }`.
    pub fn alpha(&self, iterations: u64) -> T {
        let t1 = T::of(iterations as f64 + 1.0);
        let a = (self.r0 / (self.b * t1)).sqrt();
        let b = (self.r0 / (self.h * t1)).cbrt();
        a.min(b).min(self.inv_cap.recip())
    }

    /// `2 sqrt(b r0 / (T+1)) + 2 h^(1/3) (r0 / (T+1))^(2/3) + inv_cap r0 / (T+1)`.
    pub fn rate(&self, iterations: u64) -> T {
        let u = self.r0 / T::of(iterations as f64 + 1.0);
        T::of(2.0) * (self.b * u).sqrt() + T::of(2.0) * self.h.cbrt() * u.cbrt() * u.cbrt() + self.inv_cap * u
    }
}

/// The three terms of the stationarity bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2<T> {
    pub value: T,
    /// Initial gap, gradient variance and consensus terms.
    pub terms: [T; 3],
    /// Whether `gamma` equals the recommended consensus step.
    pub gamma_matches: bool,
}

/// Largest admissible step `(1 - beta)^2 / (2L)`.
pub fn step_cap<T: Scalar>(beta: T, smoothness: T) -> T {
    pow2(T::one() - beta) / (T::of(2.0) * smoothness)
}

/// Bound on `(1/T) sum_t E||grad f(x_bar_t)||^2`.
pub fn theorem2_bound<T: Scalar>(inputs: &BoundInputs<T>) -> Result<Theorem2<T>> {
    check_common(inputs)?;
    let cap = step_cap(inputs.beta, inputs.smoothness);
    if !(inputs.alpha > T::zero() && inputs.alpha < cap) {
        return Err(Error::domain(
            "alpha",
            format!("need 0 < alpha < (1-beta)^2/(2L) = {cap}, got {}", inputs.alpha),
        ));
    }
    let tuning = StepTuning::new(inputs);
    let a = inputs.alpha;
    let terms = [
        tuning.r0 / (a * T::of(inputs.iterations as f64)),
        tuning.b * a,
        tuning.h * a * a,
    ];
    let recommended = recommended_gamma(
        inputs.rho.to_f64_lossy(),
        inputs.phi.to_f64_lossy(),
        inputs.p.to_f64_lossy(),
        inputs.k,
        inputs.d,
    )?;
    let gamma = inputs.gamma.to_f64_lossy();
    let gamma_matches = (gamma - recommended).abs() <= 1e-6 * recommended;
    Ok(Theorem2 { value: terms[0] + terms[1] + terms[2], terms, gamma_matches })
}

/// Which constant step size the rate evaluator assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateChoice {
    /// The step minimizing the three-term bound.
    Tuned,
    /// `alpha = sqrt(n / T)`.
    SqrtNT,
}

/// `4 n L^2 / (1 - beta)^4`, the horizon needed for `alpha = sqrt(n/T)`.
pub fn sqrt_nt_min_iterations<T: Scalar>(n: usize, beta: T, smoothness: T) -> u64 {
    let v = T::of(4.0 * n as f64) * smoothness * smoothness / pow2(pow2(T::one() - beta));
    v.to_f64_lossy().ceil() as u64
}

pub fn corollary1_rate<T: Scalar>(inputs: &BoundInputs<T>, choice: RateChoice) -> Result<T> {
    check_common(inputs)?;
    let i = inputs;
    match choice {
        RateChoice::Tuned => Ok(StepTuning::new(i).rate(i.iterations)),
        RateChoice::SqrtNT => {
            let minimum = sqrt_nt_min_iterations(i.n, i.beta, i.smoothness);
            if i.iterations < minimum {
                return Err(Error::TooFewIterations { iterations: i.iterations, minimum });
            }
            let one = T::one();
            let omb = one - i.beta;
            let n = T::of(i.n as f64);
            let t = T::of(i.iterations as f64);
            let root = (n * t).sqrt();
            let noise = i.g * i.g + i.sigma * i.sigma * T::of(i.d as f64);
            let c = consensus_constant(i.rho, i.p, i.k, i.d);
            let first = T::of(2.0) * i.f0_gap * omb / (i.p * root);
            let second = i.smoothness * (i.beta + T::of(2.0) + T::of(4.0) * i.beta * i.beta * i.p)
                * (noise + i.varsigma * i.varsigma)
                / (omb * omb * omb * root);
            let third = T::of(8.0) * n * i.p * noise * i.smoothness * i.smoothness / (omb * omb * c * c * t);
            Ok(first + second + third)
        }
    }
}

fn check_common<T: Scalar>(i: &BoundInputs<T>) -> Result<()> {
    if !(i.beta > T::zero() && i.beta < T::one()) {
        return Err(Error::domain("beta", format!("must lie in (0, 1), got {}", i.beta)));
    }
    if !(i.p > T::zero() && i.p <= T::one()) {
        return Err(Error::domain("p", format!("must lie in (0, 1], got {}", i.p)));
    }
    if i.k == 0 || i.k > i.d || i.n == 0 || i.iterations == 0 {
        return Err(Error::domain("bounds", "need 1 <= k <= d, n >= 1 and T >= 1"));
    }
    if !(i.rho > T::zero()) || !(i.smoothness > T::zero()) {
        return Err(Error::domain("bounds", "rho and L must be positive"));
    }
    if i.f0_gap < T::zero() {
        return Err(Error::domain("f0_gap", "must be non-negative"));
    }
    Ok(())
}
