//! Configuration-driven sweeps: build the problem and network, calibrate
//! noise, run every (sweep point, seed) pair and persist tidy CSV outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    consensus_bound, corollary1_rate, momentum_bound, theorem2_bound, BoundInputs, RateChoice,
};
use crate::engine::{recommended_gamma, RunConfig, RunMetrics, Simulation};
use crate::error::{Error, Result};
use crate::graph::{laplacian_weights, Topology, WeightMatrix};
use crate::privacy::{calibrate_sigma, noise_reduction_ratio, verify_budget, AccountingLedger, PrivacyBudget, PrivacyParams};
use crate::problems::{
    load_svmlight, quadratic_problem, solve_reference, synthetic_logistic_data, Curvature, LogisticProblem, Problem,
    SyntheticSpec, DEFAULT_REFERENCE_TOL,
};

/// Which problem to solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    SyntheticLogistic {
        n: usize,
        q: usize,
        d: usize,
        #[serde(default = "default_margin")]
        margin: f64,
        #[serde(default)]
        flip_rate: f64,
        seed: u64,
    },
    /// svmlight file split evenly across `n` agents after a seeded shuffle.
    Svmlight {
        path: PathBuf,
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
        seed: u64,
    },
    Quadratic {
        n: usize,
        d: usize,
        condition_spread: f64,
        curvature: Curvature,
        seed: u64,
    },
}

fn default_margin() -> f64 {
    4.0
}

/// Communication graph over the agents of the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    RingChords {
        chord_span: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        iota: Option<f64>,
    },
    Complete {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        iota: Option<f64>,
    },
    /// Edge-list file as written by [`Topology::to_edge_list`].
    EdgeList {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        iota: Option<f64>,
    },
}

impl TopologySpec {
    fn iota(&self) -> Option<f64> {
        match self {
            TopologySpec::RingChords { iota, .. } | TopologySpec::Complete { iota } | TopologySpec::EdgeList { iota, .. } => {
                *iota
            }
        }
    }
}

/// Optimizer settings shared by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub alpha: f64,
    pub beta: f64,
    /// Consensus step; the recommended value for each sweep point when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub iterations: u64,
    /// Clipping scale `G`.
    pub clip: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_stride")]
    pub stride: u64,
}

fn default_stride() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrivacySpec {
    /// Smallest sigma certifying each sweep epsilon.
    Calibrate { delta0: f64 },
    /// Fixed sigma; with `delta0` the run is also checked against each sweep epsilon.
    Fixed {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta0: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub p: Vec<f64>,
    pub k_over_d: Vec<f64>,
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    /// Assumed gradient dissimilarity; measured along each run when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub varsigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: ProblemSpec,
    pub topology: TopologySpec,
    pub run: RunSpec,
    pub privacy: PrivacySpec,
    pub sweep: SweepSpec,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub bounds: BoundsSpec,
}

/// One combination of the sweep axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p: f64,
    pub k_over_d: f64,
    pub epsilon: f64,
}

impl SweepPoint {
    /// `round(k_over_d d)` clamped to `[1, d]`.
    pub fn k(&self, d: usize) -> usize {
        ((self.k_over_d * d as f64).round() as usize).clamp(1, d)
    }

    fn label(&self) -> String {
        format!("p{}_kd{}_eps{}", self.p, self.k_over_d, self.epsilon)
    }
}

/// Communication utilization `p k / d`, rounded to 12 decimals so quoted
/// rates compare exactly.
pub fn utilization_rate(p: f64, k: usize, d: usize) -> f64 {
    (p * k as f64 / d as f64 * 1e12).round() / 1e12
}

/// Problem dimensions `(n, q, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub q: usize,
    pub d: usize,
}

impl ExperimentSpec {
    /// Reads a spec; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut spec: Self =
            serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ProblemSpec::Svmlight { path, .. } = &mut self.problem {
            fix(path);
        }
        if let TopologySpec::EdgeList { path, .. } = &mut self.topology {
            fix(path);
        }
        if let Some(dir) = &mut self.output_dir {
            fix(dir);
        }
    }

    /// Sweep points in sorted `(p, k_over_d, epsilon)` order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut pts = Vec::new();
        for &p in &self.sweep.p {
            for &k_over_d in &self.sweep.k_over_d {
                for &epsilon in &self.sweep.epsilon {
                    pts.push(SweepPoint { p, k_over_d, epsilon });
                }
            }
        }
        pts.sort_by(|a, b| {
            a.p.total_cmp(&b.p).then(a.k_over_d.total_cmp(&b.k_over_d)).then(a.epsilon.total_cmp(&b.epsilon))
        });
        pts.dedup();
        pts
    }

    /// Checks every field and, when calibrating, every sweep point's budget.
    /// Errors name the offending field.
    pub fn validate(&self) -> Result<Shape> {
        let shape = self.validate_problem()?;
        self.validate_topology(shape.n)?;
        self.validate_run(shape.d)?;
        let axes = [("sweep.p", &self.sweep.p), ("sweep.k_over_d", &self.sweep.k_over_d), ("sweep.epsilon", &self.sweep.epsilon)];
        for (name, axis) in axes {
            if axis.is_empty() {
                return Err(Error::config(name, "must not be empty"));
            }
        }
        for (i, &p) in self.sweep.p.iter().enumerate() {
            if !(0.5..=1.0).contains(&p) {
                return Err(Error::config(format!("sweep.p[{i}]"), format!("must lie in [0.5, 1], got {p}")));
            }
        }
        for (i, &r) in self.sweep.k_over_d.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("sweep.k_over_d[{i}]"), format!("must lie in (0, 1], got {r}")));
            }
        }
        for (i, &e) in self.sweep.epsilon.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::config(format!("sweep.epsilon[{i}]"), format!("must be positive, got {e}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if let Some(v) = self.bounds.varsigma {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config("bounds.varsigma", "must be finite and non-negative"));
            }
        }
        match self.privacy {
            PrivacySpec::Calibrate { delta0 } => {
                if !(delta0 > 0.0 && delta0 <= 1.0) {
                    return Err(Error::config("privacy.delta0", format!("must lie in (0, 1], got {delta0}")));
                }
                for pt in self.points() {
                    let params = self.privacy_params(&pt, shape, delta0);
                    let sigma = calibrate_sigma(&params)
                        .map_err(|e| Error::config(format!("sweep[{}]", pt.label()), e.to_string()))?;
                    verify_budget(&PrivacyBudget::with_sigma(params, sigma))
                        .map_err(|e| Error::config(format!("sweep[{}]", pt.label()), e.to_string()))?;
                }
            }
            PrivacySpec::Fixed { sigma, delta0 } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::config("privacy.sigma", format!("must be finite and non-negative, got {sigma}")));
                }
                if let Some(delta0) = delta0 {
                    if !(delta0 > 0.0 && delta0 <= 1.0) {
                        return Err(Error::config("privacy.delta0", format!("must lie in (0, 1], got {delta0}")));
                    }
                }
            }
        }
        Ok(shape)
    }

    fn validate_problem(&self) -> Result<Shape> {
        match &self.problem {
            ProblemSpec::SyntheticLogistic { n, q, d, margin, flip_rate, .. } => {
                positive_count("problem.n", *n)?;
                positive_count("problem.q", *q)?;
                positive_count("problem.d", *d)?;
                if !(*margin > 0.0) {
                    return Err(Error::config("problem.margin", "must be positive"));
                }
                if !(0.0..=0.5).contains(flip_rate) {
                    return Err(Error::config("problem.flip_rate", "must lie in [0, 0.5]"));
                }
                Ok(Shape { n: *n, q: *q, d: *d })
            }
            ProblemSpec::Svmlight { n, .. } => {
                positive_count("problem.n", *n)?;
                let problem = self.build_problem().map_err(|e| Error::config("problem.path", e.to_string()))?;
                Ok(Shape { n: *n, q: problem.local_size(), d: problem.dim() })
            }
            ProblemSpec::Quadratic { n, d, condition_spread, .. } => {
                positive_count("problem.n", *n)?;
                positive_count("problem.d", *d)?;
                if !(*condition_spread >= 1.0 && condition_spread.is_finite()) {
                    return Err(Error::config("problem.condition_spread", "must be finite and >= 1"));
                }
                Ok(Shape { n: *n, q: 1, d: *d })
            }
        }
    }

    fn validate_topology(&self, n: usize) -> Result<()> {
        let topo = self.build_topology(n).map_err(|e| Error::config("topology", e.to_string()))?;
        laplacian_weights(&topo, self.topology.iota()).map_err(|e| Error::config("topology.iota", e.to_string()))?;
        Ok(())
    }

    fn validate_run(&self, d: usize) -> Result<()> {
        let r = &self.run;
        if !(r.alpha > 0.0 && r.alpha.is_finite()) {
            return Err(Error::config("run.alpha", "must be positive"));
        }
        if !(r.beta > 0.0 && r.beta < 1.0) {
            return Err(Error::config("run.beta", "must lie in (0, 1)"));
        }
        if let Some(g) = r.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::config("run.gamma", "must be positive"));
            }
        }
        if r.iterations == 0 {
            return Err(Error::config("run.iterations", "must be positive"));
        }
        if !(r.clip > 0.0 && r.clip.is_finite()) {
            return Err(Error::config("run.clip", "must be positive"));
        }
        if r.stride == 0 {
            return Err(Error::config("run.stride", "must be at least 1"));
        }
        if let Some(x0) = &r.x0 {
            if x0.len() != d {
                return Err(Error::config("run.x0", format!("expected {d} entries, got {}", x0.len())));
            }
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Box<dyn Problem>> {
        build_problem(&self.problem)
    }

    pub fn build_topology(&self, n: usize) -> Result<Topology> {
        let topo = match &self.topology {
            TopologySpec::RingChords { chord_span, .. } => Topology::ring_chords(n, *chord_span)?,
            TopologySpec::Complete { .. } => Topology::complete(n)?,
            TopologySpec::EdgeList { path, .. } => Topology::from_edge_list(BufReader::new(File::open(path)?))?,
        };
        if topo.n() != n {
            return Err(Error::Topology(format!("graph has {} agents but the problem has {n}", topo.n())));
        }
        Ok(topo)
    }

    fn privacy_params(&self, pt: &SweepPoint, shape: Shape, delta0: f64) -> PrivacyParams {
        PrivacyParams {
            epsilon: pt.epsilon,
            delta0,
            iterations: self.run.iterations,
            p: pt.p,
            q: shape.q,
            k: pt.k(shape.d),
            d: shape.d,
            g: self.run.clip,
        }
    }

    /// Sigma for a sweep point with its privacy budget, if any.
    pub fn noise_for(&self, pt: &SweepPoint, shape: Shape) -> Result<(f64, Option<PrivacyBudget>)> {
        match self.privacy {
            PrivacySpec::Calibrate { delta0 } => {
                let budget = PrivacyBudget::calibrated(self.privacy_params(pt, shape, delta0))?;
                Ok((budget.sigma, Some(budget)))
            }
            PrivacySpec::Fixed { sigma, delta0 } => {
                let budget = delta0.map(|d0| PrivacyBudget::with_sigma(self.privacy_params(pt, shape, d0), sigma));
                Ok((sigma, budget))
            }
        }
    }
}

fn positive_count(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(path, "must be positive"));
    }
    Ok(())
}

fn build_problem(spec: &ProblemSpec) -> Result<Box<dyn Problem>> {
    Ok(match spec {
        ProblemSpec::SyntheticLogistic { n, q, d, margin, flip_rate, seed } => {
            let data = synthetic_logistic_data(&SyntheticSpec {
                n: *n,
                q: *q,
                d: *d,
                margin: *margin,
                flip_rate: *flip_rate,
                seed: *seed,
            });
            Box::new(LogisticProblem::new(data)?)
        }
        ProblemSpec::Svmlight { path, n, dim, seed } => {
            let mut data = load_svmlight(path)?;
            if let Some(dim) = dim {
                if data.dim() > *dim {
                    return Err(Error::Dimension { expected: *dim, got: data.dim() });
                }
                data = crate::problems::parse_svmlight(BufReader::new(File::open(path)?), Some(*dim))?;
            }
            Box::new(LogisticProblem::new(data.partition_evenly(*n, *seed)?)?)
        }
        ProblemSpec::Quadratic { n, d, condition_spread, curvature, seed } => {
            Box::new(quadratic_problem(*n, *d, *condition_spread, *curvature, *seed)?)
        }
    })
}

/// Optimal value: closed form for quadratics, the reference solver otherwise.
fn optimal_value(spec: &ProblemSpec, problem: &dyn Problem) -> Result<f64> {
    if let ProblemSpec::Quadratic { n, d, condition_spread, curvature, seed } = spec {
        return Ok(quadratic_problem(*n, *d, *condition_spread, *curvature, *seed)?.optimal_value());
    }
    Ok(solve_reference(problem, DEFAULT_REFERENCE_TOL)?.f)
}

/// Theoretical bounds for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub momentum: f64,
    pub consensus: f64,
    pub theorem2: Option<f64>,
    /// Why the stationarity bound does not apply, when it does not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theorem2_unavailable: Option<String>,
    pub gamma_matches: Option<bool>,
    pub corollary1_tuned: Option<f64>,
    pub varsigma: f64,
    pub smoothness: f64,
    pub rho: f64,
    pub phi: f64,
    pub f0_gap: f64,
}

/// Empirical counterparts of [`BoundsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    /// Largest recorded mean of `||m_i||^2` over agents.
    pub momentum_sq_max: f64,
    pub consensus_error_max: f64,
    /// Average of `||grad f(x_bar_t)||^2` over recorded `t < T`.
    pub mean_grad_norm_sq: f64,
    pub final_suboptimality: f64,
    pub final_grad_norm_sq: f64,
    pub bytes_per_iteration: f64,
    pub clipped_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_deviation: Option<f64>,
}

/// Everything needed to replay a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub problem: ProblemSpec,
    pub topology: String,
    pub topology_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iota: Option<f64>,
    pub point: SweepPoint,
    pub config: RunConfig,
    pub f_star: f64,
    pub sigma: f64,
    pub budget: Option<PrivacyBudget>,
    pub ledger: Option<AccountingLedger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_error: Option<String>,
    pub bounds: BoundsReport,
    pub empirical: EmpiricalReport,
    pub csv: String,
}

/// One aggregate row per sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub p: f64,
    pub k_over_d: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub util_rate: f64,
    pub subopt_mean: f64,
    pub subopt_std: f64,
    pub grad_norm_mean: f64,
    pub bytes_mean: f64,
    pub eps_tilde: Option<f64>,
    pub delta_tilde: Option<f64>,
}

/// Seed-averaged bounds next to their empirical counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateBoundsRow {
    pub p: f64,
    pub k_over_d: f64,
    pub epsilon: f64,
    pub momentum_bound: f64,
    /// Largest seed-averaged mean `||m||^2` over recorded iterations.
    pub momentum_emp: f64,
    pub consensus_bound: f64,
    pub consensus_emp: f64,
    pub theorem2_bound: Option<f64>,
    /// Seed average of the time-averaged `||grad f(x_bar_t)||^2`.
    pub grad_norm_avg_emp: f64,
    pub corollary1_tuned: Option<f64>,
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub aggregate: Vec<AggregateRow>,
    pub bounds: Vec<AggregateBoundsRow>,
    pub runs: usize,
}

struct Prepared {
    shape: Shape,
    problem: Box<dyn Problem>,
    topology: Topology,
    weights: WeightMatrix,
    f_star: f64,
    f0_gap: f64,
}

struct Job {
    point: SweepPoint,
    seed: u64,
}

struct Finished {
    manifest: RunManifest,
    metrics: RunMetrics,
}

/// Runs every sweep point for every seed on `workers` threads and writes
/// `runs/*.csv`, `runs/*.json`, `aggregate.csv` and `aggregate_bounds.csv`.
///
/// `out` and `stride` override the values in `spec`. Outputs do not depend on `workers`.
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>, stride: Option<u64>, workers: usize) -> Result<ExperimentOutcome> {
    let shape = spec.validate()?;
    let output_dir = out
        .map(Path::to_path_buf)
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| Error::config("output_dir", "no output directory given"))?;
    let mut spec = spec.clone();
    if let Some(s) = stride {
        if s == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        spec.run.stride = s;
    }
    let prepared = prepare(&spec, shape)?;
    let runs_dir = output_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;

    let jobs: Vec<Job> = spec
        .points()
        .into_iter()
        .flat_map(|point| spec.seeds.iter().map(move |&seed| Job { point, seed }))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let results: Vec<Result<Finished>> =
        pool.install(|| jobs.par_iter().map(|job| execute(&spec, &prepared, job, &runs_dir)).collect());

    let mut failures = String::new();
    let mut done = Vec::with_capacity(results.len());
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(f) => done.push(f),
            Err(e) => {
                let _ = writeln!(failures, "  {} seed {}: {e}", job.point.label(), job.seed);
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::RunFailures { failed: jobs.len() - done.len(), total: jobs.len(), report: failures });
    }

    let (aggregate, bounds) = aggregate(&done, &prepared);
    write_rows(&output_dir.join("aggregate.csv"), &aggregate)?;
    write_rows(&output_dir.join("aggregate_bounds.csv"), &bounds)?;
    Ok(ExperimentOutcome { output_dir, aggregate, bounds, runs: done.len() })
}

fn prepare(spec: &ExperimentSpec, shape: Shape) -> Result<Prepared> {
    let problem = spec.build_problem()?;
    let topology = spec.build_topology(shape.n)?;
    let weights = laplacian_weights(&topology, spec.topology.iota())?;
    let f_star = optimal_value(&spec.problem, problem.as_ref())?;
    let x0 = spec.run.x0.clone().unwrap_or_else(|| vec![0.0; shape.d]);
    let f0_gap = (problem.loss(&x0) - f_star).max(0.0);
    Ok(Prepared { shape, problem, topology, weights, f_star, f0_gap })
}

fn run_config(spec: &ExperimentSpec, prepared: &Prepared, point: &SweepPoint, seed: u64, sigma: f64) -> Result<RunConfig> {
    let d = prepared.shape.d;
    let k = point.k(d);
    let gamma = match spec.run.gamma {
        Some(g) => g,
        None => recommended_gamma(prepared.weights.rho(), prepared.weights.phi(), point.p, k, d)?,
    };
    Ok(RunConfig {
        alpha: spec.run.alpha,
        gamma,
        beta: spec.run.beta,
        p: point.p,
        k,
        iterations: spec.run.iterations,
        sigma,
        clip: spec.run.clip,
        seed,
        x0: spec.run.x0.clone(),
        stride: spec.run.stride,
        track_deviation: spec.bounds.varsigma.is_none(),
    })
}

fn execute(spec: &ExperimentSpec, prepared: &Prepared, job: &Job, runs_dir: &Path) -> Result<Finished> {
    let (sigma, budget) = spec.noise_for(&job.point, prepared.shape)?;
    let config = run_config(spec, prepared, &job.point, job.seed, sigma)?;
    let sim = Simulation::new(prepared.problem.as_ref(), &prepared.topology, &prepared.weights, prepared.f_star)?;
    let metrics = sim.run(&config)?;

    let (ledger, ledger_error) = match &budget {
        Some(b) => match verify_budget(b) {
            Ok(l) => (Some(l), None),
            Err(e) => (None, Some(e.to_string())),
        },
        None => (None, None),
    };
    let varsigma = spec.bounds.varsigma.unwrap_or_else(|| metrics.max_deviation.unwrap_or(0.0).sqrt());
    let bounds = bounds_report(prepared, &config, varsigma);
    let empirical = empirical_report(&metrics);

    let stem = format!("{}_seed{}", job.point.label(), job.seed);
    let csv_name = format!("{stem}.csv");
    metrics.write_csv(BufWriter::new(File::create(runs_dir.join(&csv_name))?))?;
    let manifest = RunManifest {
        problem: spec.problem.clone(),
        topology: prepared.topology.to_edge_list(),
        topology_hash: prepared.topology.content_hash(),
        iota: spec.topology.iota(),
        point: job.point,
        config,
        f_star: prepared.f_star,
        sigma,
        budget,
        ledger,
        ledger_error,
        bounds,
        empirical,
        csv: csv_name,
    };
    let file = BufWriter::new(File::create(runs_dir.join(format!("{stem}.json")))?);
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(Finished { manifest, metrics })
}

fn bound_inputs(prepared: &Prepared, config: &RunConfig, varsigma: f64) -> BoundInputs<f64> {
    BoundInputs {
        alpha: config.alpha,
        beta: config.beta,
        gamma: config.gamma,
        p: config.p,
        k: config.k,
        d: prepared.shape.d,
        n: prepared.shape.n,
        iterations: config.iterations,
        sigma: config.sigma,
        g: config.clip,
        varsigma,
        smoothness: prepared.problem.smoothness(),
        rho: prepared.weights.rho(),
        phi: prepared.weights.phi(),
        f0_gap: prepared.f0_gap,
    }
}

fn bounds_report(prepared: &Prepared, config: &RunConfig, varsigma: f64) -> BoundsReport {
    let i = bound_inputs(prepared, config, varsigma);
    let (theorem2, gamma_matches, theorem2_unavailable) = match theorem2_bound(&i) {
        Ok(b) => (Some(b.value), Some(b.gamma_matches), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    BoundsReport {
        momentum: momentum_bound(i.p, i.g, i.sigma, i.d, i.beta),
        consensus: consensus_bound(i.alpha, i.p, i.g, i.sigma, i.d, i.n, i.beta, i.rho, i.k),
        theorem2,
        theorem2_unavailable,
        gamma_matches,
        corollary1_tuned: corollary1_rate(&i, RateChoice::Tuned).ok(),
        varsigma,
        smoothness: i.smoothness,
        rho: i.rho,
        phi: i.phi,
        f0_gap: i.f0_gap,
    }
}

fn empirical_report(m: &RunMetrics) -> EmpiricalReport {
    let last = m.last();
    EmpiricalReport {
        momentum_sq_max: m.records.iter().map(|r| r.momentum_sq_mean).fold(0.0, f64::max),
        consensus_error_max: m.records.iter().map(|r| r.consensus_error).fold(0.0, f64::max),
        mean_grad_norm_sq: m.mean_grad_norm_sq(),
        final_suboptimality: last.suboptimality,
        final_grad_norm_sq: last.grad_norm_sq,
        bytes_per_iteration: m.total_bytes as f64 / m.iterations as f64,
        clipped_fraction: m.clipped_fraction,
        max_deviation: m.max_deviation,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn point_key(p: &SweepPoint) -> (u64, u64, u64) {
    (p.p.to_bits(), p.k_over_d.to_bits(), p.epsilon.to_bits())
}

fn aggregate(done: &[Finished], prepared: &Prepared) -> (Vec<AggregateRow>, Vec<AggregateBoundsRow>) {
    // Jobs are already in sorted point order; group while keeping that order.
    let mut groups: Vec<(SweepPoint, Vec<&Finished>)> = Vec::new();
    let mut index = BTreeMap::new();
    for f in done {
        let key = point_key(&f.manifest.point);
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push((f.manifest.point, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(f);
    }

    let mut rows = Vec::with_capacity(groups.len());
    let mut bounds = Vec::with_capacity(groups.len());
    for (point, runs) in groups {
        let first = &runs[0].manifest;
        let subopt: Vec<f64> = runs.iter().map(|f| f.manifest.empirical.final_suboptimality).collect();
        let grad: Vec<f64> = runs.iter().map(|f| f.manifest.empirical.final_grad_norm_sq).collect();
        let bytes: Vec<f64> = runs.iter().map(|f| f.manifest.empirical.bytes_per_iteration).collect();
        rows.push(AggregateRow {
            p: point.p,
            k_over_d: point.k_over_d,
            epsilon: point.epsilon,
            sigma: first.sigma,
            util_rate: utilization_rate(point.p, first.config.k, prepared.shape.d),
            subopt_mean: mean(&subopt),
            subopt_std: std_dev(&subopt),
            grad_norm_mean: mean(&grad),
            bytes_mean: mean(&bytes),
            eps_tilde: first.ledger.map(|l| l.composed_eps),
            delta_tilde: first.ledger.map(|l| l.composed_delta),
        });

        let seeds = runs.len() as f64;
        let len = runs[0].metrics.records.len();
        let averaged = |f: fn(&crate::engine::Record) -> f64| {
            (0..len)
                .map(|r| runs.iter().map(|run| f(&run.metrics.records[r])).sum::<f64>() / seeds)
                .fold(0.0, f64::max)
        };
        // The worst seed's dissimilarity makes the averaged bound conservative.
        let varsigma = runs.iter().map(|f| f.manifest.bounds.varsigma).fold(0.0, f64::max);
        let report = bounds_report(prepared, &first.config, varsigma);
        bounds.push(AggregateBoundsRow {
            p: point.p,
            k_over_d: point.k_over_d,
            epsilon: point.epsilon,
            momentum_bound: report.momentum,
            momentum_emp: averaged(|r| r.momentum_sq_mean),
            consensus_bound: report.consensus,
            consensus_emp: averaged(|r| r.consensus_error),
            theorem2_bound: report.theorem2,
            grad_norm_avg_emp: mean(&runs.iter().map(|f| f.metrics.mean_grad_norm_sq()).collect::<Vec<_>>()),
            corollary1_tuned: report.corollary1_tuned,
        });
    }
    (rows, bounds)
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Re-executes the run described by a manifest.
pub fn replay_manifest(path: impl AsRef<Path>) -> Result<RunMetrics> {
    let manifest: RunManifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let problem = build_problem(&manifest.problem)?;
    let topology = Topology::from_edge_list(manifest.topology.as_bytes())?;
    if topology.content_hash() != manifest.topology_hash {
        return Err(Error::config("topology_hash", "does not match the recorded edge list"));
    }
    let weights = laplacian_weights(&topology, manifest.iota)?;
    let sim = Simulation::new(problem.as_ref(), &topology, &weights, manifest.f_star)?;
    sim.run(&manifest.config)
}

/// Calibrated sigma, accounting ledger and noise-reduction ratio for every
/// sweep point.
pub fn budget_report(spec: &ExperimentSpec) -> Result<String> {
    let shape = spec.validate()?;
    let delta0 = match spec.privacy {
        PrivacySpec::Calibrate { delta0 } => delta0,
        PrivacySpec::Fixed { delta0: Some(d0), .. } => d0,
        PrivacySpec::Fixed { delta0: None, .. } => {
            return Err(Error::config("privacy.delta0", "a budget report needs delta0"));
        }
    };
    let mut out = String::new();
    let _ = writeln!(out, "n = {}, q = {}, d = {}, T = {}, G = {}, delta0 = {delta0:e}", shape.n, shape.q, shape.d, spec.run.iterations, spec.run.clip);
    for pt in spec.points() {
        let (sigma, budget) = spec.noise_for(&pt, shape)?;
        let budget = budget.expect("delta0 is known here");
        let k = pt.k(shape.d);
        let ledger = verify_budget(&budget)?;
        let _ = writeln!(out);
        let _ = writeln!(out, "p = {}, k/d = {} (k = {k}), epsilon = {}", pt.p, pt.k_over_d, pt.epsilon);
        let _ = writeln!(out, "sigma            {sigma:.6e}");
        let _ = writeln!(out, "variance ratio   {:.6} (k p^2 / d versus k = d, p = 1)", noise_reduction_ratio(k, shape.d, pt.p));
        let _ = writeln!(out, "utilization      {}", utilization_rate(pt.p, k, shape.d));
        let _ = writeln!(out, "stage           epsilon      delta");
        out.push_str(&ledger.report());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> ExperimentSpec {
        serde_json::from_str(
            r#"{
                "problem": {"kind": "synthetic_logistic", "n": 6, "q": 8, "d": 10, "seed": 1},
                "topology": {"kind": "ring_chords", "chord_span": 1},
                "run": {"alpha": 0.05, "beta": 0.5, "iterations": 300, "clip": 1.0},
                "privacy": {"mode": "calibrate", "delta0": 1e-5},
                "sweep": {"p": [1.0, 0.8], "k_over_d": [1.0, 0.3], "epsilon": [0.5]},
                "seeds": [1, 2]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn points_are_sorted() {
        let pts = small_spec().points();
        let util: Vec<f64> = pts.iter().map(|p| utilization_rate(p.p, p.k(10), 10)).collect();
        assert_eq!(util, vec![0.24, 0.8, 0.3, 1.0]);
    }

    #[test]
    fn utilization_matches_quoted_rates() {
        assert_eq!(utilization_rate(0.8, 600, 2000), 0.24);
        assert_eq!(utilization_rate(1.0, 600, 2000), 0.3);
        assert_eq!(utilization_rate(0.8, 2000, 2000), 0.8);
        assert_eq!(utilization_rate(1.0, 2000, 2000), 1.0);
    }

    #[test]
    fn k_rounding() {
        let pt = SweepPoint { p: 1.0, k_over_d: 0.001, epsilon: 1.0 };
        assert_eq!(pt.k(30), 1);
        assert_eq!(SweepPoint { k_over_d: 0.3, ..pt }.k(30), 9);
        assert_eq!(SweepPoint { k_over_d: 1.0, ..pt }.k(30), 30);
    }

    #[test]
    fn validation_names_fields() {
        let mut s = small_spec();
        s.seeds.clear();
        assert!(matches!(s.validate(), Err(Error::Config { path, .. }) if path == "seeds"));
        let mut s = small_spec();
        s.sweep.p = vec![1.0, 0.2];
        assert!(matches!(s.validate(), Err(Error::Config { path, .. }) if path == "sweep.p[1]"));
        let mut s = small_spec();
        s.run.x0 = Some(vec![0.0; 3]);
        assert!(matches!(s.validate(), Err(Error::Config { path, .. }) if path == "run.x0"));
        let mut s = small_spec();
        s.run.iterations = 1;
        s.sweep.epsilon = vec![1.0];
        assert!(matches!(s.validate(), Err(Error::Config { path, .. }) if path.starts_with("sweep[")));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = r#"{"alpha": 0.1, "beta": 0.5, "iterations": 3, "clip": 1.0, "alpah": 2}"#;
        assert!(serde_json::from_str::<RunSpec>(bad).is_err());
    }

    #[test]
    fn budget_report_ratio() {
        let mut s = small_spec();
        s.sweep = SweepSpec { p: vec![0.8], k_over_d: vec![0.3], epsilon: vec![0.5] };
        let report = budget_report(&s).unwrap();
        assert!(report.contains("variance ratio   0.192000"), "{report}");
    }

    #[test]
    fn sigma_scales_inversely_with_epsilon() {
        let s = small_spec();
        let shape = s.validate().unwrap();
        let a = s.noise_for(&SweepPoint { p: 1.0, k_over_d: 1.0, epsilon: 0.01 }, shape).unwrap().0;
        let b = s.noise_for(&SweepPoint { p: 1.0, k_over_d: 1.0, epsilon: 0.1 }, shape).unwrap().0;
        assert!((a / b - 10.0).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let out = run_experiment(&spec, Some(dir.path()), None, 2).unwrap();
        assert_eq!(out.aggregate.len(), 4);
        assert_eq!(out.runs, 8);
        let text = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert!(text.starts_with(
            "p,k_over_d,epsilon,sigma,util_rate,subopt_mean,subopt_std,grad_norm_mean,bytes_mean,eps_tilde,delta_tilde\n"
        ));
        let manifest = dir.path().join("runs").join("p0.8_kd0.3_eps0.5_seed2.json");
        let replayed = replay_manifest(&manifest).unwrap();
        let stored = fs::read_to_string(dir.path().join("runs").join("p0.8_kd0.3_eps0.5_seed2.csv")).unwrap();
        assert_eq!(replayed.to_csv_string().unwrap(), stored);
    }
}
