use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Problem;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Whether agents share one Hessian or each draw their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Shared,
    PerAgent,
}

/// `f_i(x) = 1/2 (x - c_i)^T A_i (x - c_i)` with SPD `A_i`; one deterministic
/// sample per agent.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    a: Vec<DMatrix<f64>>,
    c: Vec<DVector<f64>>,
    x_star: Vec<f64>,
    f_star: f64,
    smoothness: f64,
}

impl QuadraticProblem {
    pub fn new(a: Vec<DMatrix<f64>>, c: Vec<DVector<f64>>) -> Result<Self> {
        if a.is_empty() || a.len() != c.len() {
            return Err(Error::Dimension { expected: a.len(), got: c.len() });
        }
        let d = c[0].len();
        let mut sum_a = DMatrix::zeros(d, d);
        let mut sum_ac = DVector::zeros(d);
        let mut smoothness: f64 = 0.0;
        for (ai, ci) in a.iter().zip(&c) {
            if ai.nrows() != d || ai.ncols() != d || ci.len() != d {
                return Err(Error::Dimension { expected: d, got: ai.nrows() });
            }
            let eig = ai.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            if !(min > 0.0) || (ai - ai.transpose()).amax() > 1e-12 {
                return Err(Error::domain("A_i", "curvature matrices must be symmetric positive definite"));
            }
            smoothness = smoothness.max(eig.eigenvalues.max());
            sum_a += ai;
            sum_ac += ai * ci;
        }
        let chol = sum_a
            .cholesky()
            .ok_or_else(|| Error::domain("A_i", "summed curvature is not positive definite"))?;
        let x_star = chol.solve(&sum_ac);
        let mut problem = Self { a, c, x_star: x_star.as_slice().to_vec(), f_star: 0.0, smoothness };
        problem.f_star = problem.loss(&problem.x_star.clone());
        Ok(problem)
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.x_star
    }

    pub fn optimal_value(&self) -> f64 {
        self.f_star
    }

    pub fn center(&self, agent: usize) -> &[f64] {
        self.c[agent].as_slice()
    }
}

fn random_spd(d: usize, spread: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let lambdas: Vec<f64> = (0..d)
        .map(|j| match j {
            0 => 1.0,
            1 => spread,
            _ => rng.random_range(1.0..=spread),
        })
        .collect();
    let mut a = &q * DMatrix::from_diagonal(&DVector::from_vec(lambdas)) * q.transpose();
    // Exact symmetry.
    let at = a.transpose();
    a = (a + at) * 0.5;
    a
}

/// Random instance with curvature eigenvalues in `[1, condition_spread]` and
/// Gaussian centres `c_i`.
pub fn quadratic_problem(n: usize, d: usize, condition_spread: f64, curvature: Curvature, seed: u64) -> Result<QuadraticProblem> {
    if n == 0 || d == 0 {
        return Err(Error::domain("quadratic", "need at least one agent and one dimension"));
    }
    if !(condition_spread >= 1.0 && condition_spread.is_finite()) {
        return Err(Error::domain("condition_spread", format!("must be finite and >= 1, got {condition_spread}")));
    }
    let mut shared_rng = stream(seed, u64::MAX, 0, Purpose::Problem);
    let shared = random_spd(d, condition_spread, &mut shared_rng);
    let mut a = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for agent in 0..n {
        let mut rng = stream(seed, agent as u64, 0, Purpose::Problem);
        c.push(DVector::from_fn(d, |_, _| rng.sample(StandardNormal)));
        a.push(match curvature {
            Curvature::Shared => shared.clone(),
            Curvature::PerAgent => random_spd(d, condition_spread, &mut rng),
        });
    }
    QuadraticProblem::new(a, c)
}

impl Problem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.x_star.len()
    }

    fn agents(&self) -> usize {
        self.a.len()
    }

    fn local_size(&self) -> usize {
        1
    }

    fn sample_grad(&self, agent: usize, _sample: usize, x: &[f64], out: &mut [f64]) {
        let a = &self.a[agent];
        let c = &self.c[agent];
        let d = c.len();
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|j| a[(r, j)] * (x[j] - c[j])).sum();
        }
    }

    fn local_grad(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        self.sample_grad(agent, 0, x, out);
    }

    fn local_loss(&self, agent: usize, x: &[f64]) -> f64 {
        let a = &self.a[agent];
        let diff = DVector::from_iterator(x.len(), x.iter().zip(self.c[agent].iter()).map(|(u, v)| u - v));
        0.5 * diff.dot(&(a * &diff))
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }
}
