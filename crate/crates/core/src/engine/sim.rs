use rand::Rng;

use super::agent::{agent_step, replica_apply, AgentState, LocalUpdate, StepParams};
use super::metrics::{Record, RunMetrics};
use super::{activation_draw, RunConfig};
use crate::compress::{clip_in_place, SparseUpdate};
use crate::error::{Error, Result};
use crate::graph::{Topology, WeightMatrix};
use crate::privacy::fill_gaussian_noise;
use crate::problems::{gradient_deviation, Problem};
use crate::rng::{stream, Purpose};
use crate::scalar::{dist_sq, norm_sq};

/// What happened in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub t: u64,
    pub active: Vec<bool>,
    /// `(sender, message)` for every active agent, in agent order.
    pub messages: Vec<(usize, SparseUpdate<f64>)>,
    pub bytes: u64,
}

/// A problem placed on a network.
#[derive(Clone, Copy)]
pub struct Simulation<'a> {
    problem: &'a dyn Problem,
    topology: &'a Topology,
    weights: &'a WeightMatrix,
    f_star: f64,
}

impl<'a> Simulation<'a> {
    /// `f_star` is the optimal value used for suboptimality.
    pub fn new(problem: &'a dyn Problem, topology: &'a Topology, weights: &'a WeightMatrix, f_star: f64) -> Result<Self> {
        let n = topology.n();
        if problem.agents() != n {
            return Err(Error::Dimension { expected: n, got: problem.agents() });
        }
        if weights.n() != n {
            return Err(Error::Dimension { expected: n, got: weights.n() });
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && weights.get(i, j) != 0.0 && !topology.has_edge(i, j) {
                    return Err(Error::Weights(format!("w[{i}][{j}] is nonzero but ({i}, {j}) is not an edge")));
                }
            }
        }
        Ok(Self { problem, topology, weights, f_star })
    }

    pub fn stepper(&self, config: &RunConfig) -> Result<Stepper<'a>> {
        Stepper::new(*self, config.clone())
    }

    /// Executes `config.iterations` rounds and records metrics every
    /// `config.stride` rounds, at round 0, and at the last round.
    pub fn run(&self, config: &RunConfig) -> Result<RunMetrics> {
        let mut stepper = self.stepper(config)?;
        let mut records = vec![stepper.record(0)?];
        let mut total_messages = 0u64;
        for t in 0..config.iterations {
            let trace = stepper.step()?;
            total_messages += trace.messages.len() as u64;
            let done = t + 1;
            if done % config.stride == 0 || done == config.iterations {
                records.push(stepper.record(trace.active.iter().filter(|a| **a).count())?);
            }
        }
        let max_deviation = records
            .iter()
            .filter_map(|r| r.deviation_max)
            .reduce(f64::max);
        let coords = stepper.gradient_coords;
        Ok(RunMetrics {
            records,
            iterations: config.iterations,
            total_bytes: stepper.bytes_cum,
            total_messages,
            clipped_fraction: if coords == 0 { 0.0 } else { stepper.clipped as f64 / coords as f64 },
            max_deviation,
            final_mean: stepper.mean(),
        })
    }
}

/// Round-by-round driver holding every agent's state.
pub struct Stepper<'a> {
    sim: Simulation<'a>,
    config: RunConfig,
    agents: Vec<AgentState<f64>>,
    /// `(j, w_ij)` for each neighbour `j` of each agent.
    mixing: Vec<Vec<(usize, f64)>>,
    t: u64,
    bytes_cum: u64,
    clipped: u64,
    gradient_coords: u64,
}

impl<'a> Stepper<'a> {
    fn new(sim: Simulation<'a>, config: RunConfig) -> Result<Self> {
        let d = sim.problem.dim();
        config.validate(d)?;
        let x0 = config.x0.clone().unwrap_or_else(|| vec![0.0; d]);
        let n = sim.topology.n();
        let agents = (0..n)
            .map(|i| AgentState::new(i, x0.clone(), sim.topology.neighbors(i)))
            .collect();
        let mixing = (0..n)
            .map(|i| sim.topology.neighbors(i).iter().map(|&j| (j, sim.weights.get(i, j))).collect())
            .collect();
        Ok(Self { sim, config, agents, mixing, t: 0, bytes_cum: 0, clipped: 0, gradient_coords: 0 })
    }

    pub fn agents(&self) -> &[AgentState<f64>] {
        &self.agents
    }

    /// Completed rounds.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    /// Network average of the private iterates.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.agents.len() as f64;
        let mut mean = vec![0.0; self.sim.problem.dim()];
        for a in &self.agents {
            mean.iter_mut().zip(&a.x).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Runs one synchronous round.
    pub fn step(&mut self) -> Result<IterationTrace> {
        let cfg = &self.config;
        let problem = self.sim.problem;
        let d = problem.dim();
        let q = problem.local_size();
        let t = self.t;
        let params = StepParams { alpha: cfg.alpha, gamma: cfg.gamma, beta: cfg.beta, k: cfg.k };
        let mut grad = vec![0.0; d];
        let mut noise = vec![0.0; d];

        // Phase 1: every agent reads round-t replicas and computes its update.
        let mut outputs = Vec::with_capacity(self.agents.len());
        let mut active = Vec::with_capacity(self.agents.len());
        for (i, state) in self.agents.iter().enumerate() {
            let key = i as u64;
            let eta = activation_draw(cfg.p, &mut stream(cfg.seed, key, t, Purpose::Activation));
            let update = if eta {
                let sample = stream(cfg.seed, key, t, Purpose::DataSample).random_range(0..q);
                problem.sample_grad(i, sample, &state.x, &mut grad);
                self.clipped += clip_in_place(&mut grad, cfg.clip)? as u64;
                self.gradient_coords += d as u64;
                fill_gaussian_noise(&mut noise, cfg.sigma, &mut stream(cfg.seed, key, t, Purpose::Noise));
                Some(LocalUpdate { grad: &grad, noise: &noise })
            } else {
                None
            };
            outputs.push(agent_step(state, update, &self.mixing[i], &params)?);
            active.push(eta);
        }

        // Barrier, then phase 2: commit private state and advance replicas.
        let mut messages = Vec::new();
        for (state, out) in self.agents.iter_mut().zip(outputs) {
            state.x = out.x;
            state.m = out.m;
            if let Some(s) = out.message {
                messages.push((state.id, s));
            }
        }
        for (sender, s) in &messages {
            let sender = *sender;
            replica_apply(&mut self.agents[sender], sender, Some(s))?;
            for &j in self.sim.topology.neighbors(sender) {
                replica_apply(&mut self.agents[j], sender, Some(s))?;
            }
        }

        for state in &self.agents {
            if state.x.iter().chain(&state.m).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { iteration: t, agent: state.id });
            }
        }

        let bytes = messages.iter().map(|(_, s)| s.wire_bytes()).sum();
        self.bytes_cum += bytes;
        self.t += 1;
        Ok(IterationTrace { t, active, messages, bytes })
    }

    fn record(&self, active_count: usize) -> Result<Record> {
        let problem = self.sim.problem;
        let mean = self.mean();
        let mut g = vec![0.0; mean.len()];
        problem.grad(&mean, &mut g);
        let consensus_error = self.agents.iter().map(|a| dist_sq(&mean, &a.x)).sum();
        let momentum_sq_mean =
            self.agents.iter().map(|a| norm_sq(&a.m)).sum::<f64>() / self.agents.len() as f64;
        let deviation_max = self.config.track_deviation.then(|| {
            self.agents
                .iter()
                .map(|a| gradient_deviation(problem, a.id, &a.x, self.config.clip))
                .fold(0.0, f64::max)
        });
        Ok(Record {
            iter: self.t,
            suboptimality: problem.loss(&mean) - self.sim.f_star,
            grad_norm_sq: norm_sq(&g),
            consensus_error,
            bytes_cum: self.bytes_cum,
            active_count,
            momentum_sq_mean,
            deviation_max,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::message_bytes;
    use crate::graph::laplacian_weights;
    use crate::problems::{quadratic_problem, Curvature};

    fn cfg(p: f64, k: usize, iterations: u64) -> RunConfig {
        RunConfig {
            alpha: 0.05,
            gamma: 0.2,
            beta: 0.5,
            p,
            k,
            iterations,
            sigma: 0.1,
            clip: 10.0,
            seed: 7,
            x0: None,
            stride: 1,
            track_deviation: false,
        }
    }

    #[test]
    fn replicas_stay_consistent() {
        let topo = Topology::ring_chords(5, 1).unwrap();
        let w = laplacian_weights(&topo, None).unwrap();
        let prob = quadratic_problem(5, 6, 4.0, Curvature::PerAgent, 1).unwrap();
        let sim = Simulation::new(&prob, &topo, &w, prob.optimal_value()).unwrap();
        let mut st = sim.stepper(&cfg(0.7, 2, 100)).unwrap();
        for _ in 0..100 {
            st.step().unwrap();
            let agents = st.agents();
            for (i, j) in topo.edges() {
                assert_eq!(agents[i].replica(j), agents[j].replica(j));
                assert_eq!(agents[j].replica(i), agents[i].replica(i));
            }
            for a in agents {
                assert_eq!(a.replica_ids().count(), topo.degree(a.id) + 1);
            }
        }
    }

    #[test]
    fn messages_only_from_active_agents() {
        let topo = Topology::ring_chords(6, 1).unwrap();
        let w = laplacian_weights(&topo, None).unwrap();
        let prob = quadratic_problem(6, 4, 2.0, Curvature::Shared, 3).unwrap();
        let sim = Simulation::new(&prob, &topo, &w, 0.0).unwrap();
        let mut st = sim.stepper(&cfg(0.6, 3, 50)).unwrap();
        for _ in 0..50 {
            let tr = st.step().unwrap();
            let senders: Vec<usize> = tr.messages.iter().map(|(s, _)| *s).collect();
            let expected: Vec<usize> = (0..6).filter(|&i| tr.active[i]).collect();
            assert_eq!(senders, expected);
            assert_eq!(tr.bytes, senders.len() as u64 * message_bytes(3));
        }
    }

    #[test]
    fn gossip_preserves_mean_without_gradient_step() {
        let topo = Topology::ring_chords(8, 2).unwrap();
        let w = laplacian_weights(&topo, None).unwrap();
        let prob = quadratic_problem(8, 5, 3.0, Curvature::PerAgent, 4).unwrap();
        let sim = Simulation::new(&prob, &topo, &w, 0.0).unwrap();
        let mut config = cfg(0.8, 2, 0);
        config.alpha = f64::MIN_POSITIVE;
        config.x0 = Some(vec![1.0, -1.0, 0.5, 2.0, 0.0]);
        let mut st = sim.stepper(&config).unwrap();
        let start = st.mean();
        for _ in 0..200 {
            st.step().unwrap();
        }
        for (a, b) in st.mean().iter().zip(&start) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_config_is_deterministic() {
        let topo = Topology::ring_chords(5, 1).unwrap();
        let w = laplacian_weights(&topo, None).unwrap();
        let prob = quadratic_problem(5, 3, 2.0, Curvature::PerAgent, 0).unwrap();
        let sim = Simulation::new(&prob, &topo, &w, prob.optimal_value()).unwrap();
        let a = sim.run(&cfg(0.8, 2, 300)).unwrap();
        let b = sim.run(&cfg(0.8, 2, 300)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
    }

    #[test]
    fn stride_keeps_first_and_last() {
        let topo = Topology::ring_chords(5, 1).unwrap();
        let w = laplacian_weights(&topo, None).unwrap();
        let prob = quadratic_problem(5, 3, 2.0, Curvature::PerAgent, 0).unwrap();
        let sim = Simulation::new(&prob, &topo, &w, 0.0).unwrap();
        let m = sim.run(&RunConfig { stride: 4, ..cfg(1.0, 3, 10) }).unwrap();
        let iters: Vec<u64> = m.records.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 4, 8, 10]);
    }

    #[test]
    fn blow_up_reports_iteration() {
        let topo = Topology::ring_chords(5, 1).unwrap();
        let w = laplacian_weights(&topo, None).unwrap();
        let prob = quadratic_problem(5, 3, 2.0, Curvature::PerAgent, 0).unwrap();
        let sim = Simulation::new(&prob, &topo, &w, 0.0).unwrap();
        let config = RunConfig { sigma: 1e300, beta: 0.99, alpha: 1e10, ..cfg(1.0, 3, 1000) };
        assert!(matches!(sim.run(&config), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rejects_mismatched_problem() {
        let topo = Topology::ring_chords(5, 1).unwrap();
        let w = laplacian_weights(&topo, None).unwrap();
        let prob = quadratic_problem(4, 3, 2.0, Curvature::PerAgent, 0).unwrap();
        assert!(Simulation::new(&prob, &topo, &w, 0.0).is_err());
    }
}
