//! Loss functions, stochastic gradient oracles, datasets and the reference solver.

mod dataset;
mod logistic;
mod quadratic;

pub use dataset::{load_svmlight, parse_svmlight, synthetic_logistic_data, write_svmlight, Dataset, DatasetManifest, SyntheticSpec};
pub use logistic::{logistic_grad, logistic_loss, LogisticProblem, Sample};
pub use quadratic::{quadratic_problem, Curvature, QuadraticProblem};

use crate::error::{Error, Result};
use crate::scalar::norm_sq;

/// A finite-sum problem split across `n` agents, each holding `q` samples.
///
/// `f(x) = (1/n) sum_i f_i(x)` with `f_i(x) = (1/q) sum_j l_i(x, zeta_j)`.
pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;
    fn agents(&self) -> usize;
    /// Local dataset size `q`.
    fn local_size(&self) -> usize;

    /// Stochastic gradient `grad l_i(x, zeta_sample)` written into `out`.
    fn sample_grad(&self, agent: usize, sample: usize, x: &[f64], out: &mut [f64]);

    fn local_loss(&self, agent: usize, x: &[f64]) -> f64;

    /// Full local gradient `grad f_i(x)`.
    fn local_grad(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        let q = self.local_size();
        let mut buf = vec![0.0; self.dim()];
        out.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..q {
            self.sample_grad(agent, s, x, &mut buf);
            out.iter_mut().zip(&buf).for_each(|(o, b)| *o += b);
        }
        out.iter_mut().for_each(|o| *o /= q as f64);
    }

    /// Smoothness constant `L` shared by every `f_i`.
    fn smoothness(&self) -> f64;

    fn loss(&self, x: &[f64]) -> f64 {
        let n = self.agents();
        (0..n).map(|i| self.local_loss(i, x)).sum::<f64>() / n as f64
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let n = self.agents();
        let mut buf = vec![0.0; self.dim()];
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            self.local_grad(i, x, &mut buf);
            out.iter_mut().zip(&buf).for_each(|(o, b)| *o += b);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
}

/// Reference minimizer and optimal value.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

pub const DEFAULT_REFERENCE_TOL: f64 = 1e-9;
const MAX_SOLVER_ITERATIONS: usize = 1_000_000;

/// Full-batch gradient descent with Armijo backtracking until
/// `||grad f|| <= tolerance`.
pub fn solve_reference(problem: &dyn Problem, tolerance: f64) -> Result<Reference> {
    solve_reference_from(problem, &vec![0.0; problem.dim()], tolerance)
}

pub fn solve_reference_from(problem: &dyn Problem, x0: &[f64], tolerance: f64) -> Result<Reference> {
    if !(tolerance > 0.0) {
        return Err(Error::domain("tolerance", "must be positive"));
    }
    let d = problem.dim();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    let mut trial = vec![0.0; d];
    let mut f = problem.loss(&x);
    problem.grad(&x, &mut g);
    let min_step = 1.0 / problem.smoothness();
    let mut step = min_step;
    for it in 0..MAX_SOLVER_ITERATIONS {
        let gn2 = norm_sq(&g);
        if gn2.sqrt() <= tolerance {
            return Ok(Reference { x, f, grad_norm: gn2.sqrt(), iterations: it });
        }
        // Let the step grow again after each accepted move.
        step *= 2.0;
        loop {
            for ((t, xi), gi) in trial.iter_mut().zip(&x).zip(&g) {
                *t = xi - step * gi;
            }
            let ft = problem.loss(&trial);
            // Steps up to 1/L always descend; accepting them avoids stalling
            // when the decrease is below loss resolution.
            if ft <= f - 0.5 * step * gn2 || step <= min_step {
                f = ft;
                break;
            }
            step *= 0.5;
        }
        std::mem::swap(&mut x, &mut trial);
        problem.grad(&x, &mut g);
    }
    Err(Error::NoConvergence { iterations: MAX_SOLVER_ITERATIONS, grad_norm: norm_sq(&g).sqrt() })
}

/// Empirical `E ||g_clip(x, zeta) - grad f_i(x)||^2` for one agent, where the
/// sample gradients are clipped per coordinate at `clip / sqrt(d)`.
pub fn gradient_deviation(problem: &dyn Problem, agent: usize, x: &[f64], clip: f64) -> f64 {
    let d = problem.dim();
    let q = problem.local_size();
    let mut full = vec![0.0; d];
    problem.local_grad(agent, x, &mut full);
    let limit = clip / (d as f64).sqrt();
    let mut buf = vec![0.0; d];
    let mut acc = 0.0;
    for s in 0..q {
        problem.sample_grad(agent, s, x, &mut buf);
        acc += buf
            .iter()
            .zip(&full)
            .map(|(g, f)| {
                let c = g.clamp(-limit, limit) - f;
                c * c
            })
            .sum::<f64>();
    }
    acc / q as f64
}
