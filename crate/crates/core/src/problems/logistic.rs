use nalgebra::DMatrix;

use super::dataset::Dataset;
use super::Problem;
use crate::error::{Error, Result};

/// One labelled example.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub a: &'a [f64],
    pub b: f64,
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check(x: &[f64], s: &Sample<'_>) -> Result<()> {
    if s.b != 1.0 && s.b != -1.0 {
        return Err(Error::domain("label", format!("expected +1 or -1, got {}", s.b)));
    }
    if x.len() != s.a.len() {
        return Err(Error::Dimension { expected: s.a.len(), got: x.len() });
    }
    Ok(())
}

/// Per-sample loss `log(1 + exp(-b a.x)) + ||x||^2 / (2q)`.
///
/// Averaging over the `q` local samples gives the regularized local objective
/// exactly, so the stochastic gradient is unbiased.
pub fn logistic_loss(x: &[f64], sample: Sample<'_>, q: usize) -> Result<f64> {
    check(x, &sample)?;
    Ok(loss_unchecked(x, sample, q))
}

pub fn logistic_grad(x: &[f64], sample: Sample<'_>, q: usize) -> Result<Vec<f64>> {
    check(x, &sample)?;
    let mut out = vec![0.0; x.len()];
    grad_unchecked(x, sample, q, &mut out);
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn loss_unchecked(x: &[f64], s: Sample<'_>, q: usize) -> f64 {
    let margin = s.b * dot(s.a, x);
    softplus(-margin) + dot(x, x) / (2.0 * q as f64)
}

fn grad_unchecked(x: &[f64], s: Sample<'_>, q: usize, out: &mut [f64]) {
    let margin = s.b * dot(s.a, x);
    let coef = -s.b * sigmoid(-margin);
    let inv_q = 1.0 / q as f64;
    for ((o, a), xi) in out.iter_mut().zip(s.a).zip(x) {
        *o = coef * a + xi * inv_q;
    }
}

/// Regularized logistic regression over an evenly partitioned dataset.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    data: Dataset,
    q: usize,
    smoothness: f64,
}

impl LogisticProblem {
    pub fn new(data: Dataset) -> Result<Self> {
        let q = data
            .local_size()
            .filter(|&q| q > 0)
            .ok_or_else(|| Error::domain("partition", "dataset must be split evenly across agents"))?;
        let d = data.dim();
        let mut smoothness: f64 = 0.0;
        for agent in 0..data.agents() {
            let mut gram = DMatrix::<f64>::zeros(d, d);
            for s in data.local(agent) {
                let a = nalgebra::DVector::from_column_slice(data.features(s));
                gram += &a * a.transpose();
            }
            let top = gram.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max);
            smoothness = smoothness.max(top / (4.0 * q as f64) + 1.0 / q as f64);
        }
        Ok(Self { data, q, smoothness })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    fn sample(&self, agent: usize, s: usize) -> Sample<'_> {
        let idx = self.data.local(agent).start + s;
        Sample { a: self.data.features(idx), b: self.data.label(idx) }
    }
}

impl Problem for LogisticProblem {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn agents(&self) -> usize {
        self.data.agents()
    }

    fn local_size(&self) -> usize {
        self.q
    }

    fn sample_grad(&self, agent: usize, sample: usize, x: &[f64], out: &mut [f64]) {
        grad_unchecked(x, self.sample(agent, sample), self.q, out);
    }

    fn local_loss(&self, agent: usize, x: &[f64]) -> f64 {
        let data = (0..self.q)
            .map(|s| {
                let smp = self.sample(agent, s);
                softplus(-smp.b * dot(smp.a, x))
            })
            .sum::<f64>()
            / self.q as f64;
        data + dot(x, x) / (2.0 * self.q as f64)
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{synthetic_logistic_data, SyntheticSpec};
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_point_values() {
        let a = [0.3, -1.2, 2.0];
        let s = Sample { a: &a, b: -1.0 };
        let x = [0.0; 3];
        assert!((logistic_loss(&x, s, 5).unwrap() - 2f64.ln()).abs() < 1e-15);
        let g = logistic_grad(&x, s, 5).unwrap();
        for (gi, ai) in g.iter().zip(&a) {
            assert!((gi - ai / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_margin_is_stable() {
        let a = [50.0];
        let l = logistic_loss(&[1.0], Sample { a: &a, b: 1.0 }, 1_000_000_000).unwrap();
        assert!((l - ((-50f64).exp() + 0.5e-9)).abs() < 1e-24);
        let l = logistic_loss(&[-1.0], Sample { a: &a, b: 1.0 }, 1_000_000_000).unwrap();
        assert!((l - 50.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_label() {
        assert!(logistic_loss(&[0.0], Sample { a: &[1.0], b: 0.5 }, 1).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..100 {
            let d = 8;
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let q = rng.random_range(1..20);
            let s = Sample { a: &a, b };
            let g = logistic_grad(&x, s, q).unwrap();
            for j in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (logistic_loss(&xp, s, q).unwrap() - logistic_loss(&xm, s, q).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-2), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn global_gradient_is_mean_of_local() {
        let data = synthetic_logistic_data(&SyntheticSpec { n: 4, q: 10, d: 5, margin: 1.0, flip_rate: 0.0, seed: 3 });
        let p = LogisticProblem::new(data).unwrap();
        let x = [0.1, -0.4, 0.3, 0.0, 0.9];
        let mut g = vec![0.0; 5];
        p.grad(&x, &mut g);
        let mut acc = vec![0.0; 5];
        let mut buf = vec![0.0; 5];
        for i in 0..4 {
            p.local_grad(i, &x, &mut buf);
            acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b / 4.0);
        }
        for (u, v) in g.iter().zip(&acc) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
