use crate::compress::{top_k, SparseUpdate};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One agent's private iterate, momentum and replica table.
///
/// The replica table holds the public copies `x_hat_j` for the agent itself
/// and each neighbour, sorted by agent id.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState<T> {
    pub id: usize,
    pub x: Vec<T>,
    pub m: Vec<T>,
    replicas: Vec<(usize, Vec<T>)>,
}

impl<T: Scalar> AgentState<T> {
    /// `x = x0`, `m = 0` and every replica zero.
    pub fn new(id: usize, x0: Vec<T>, neighbors: &[usize]) -> Self {
        let d = x0.len();
        let mut ids: Vec<usize> = neighbors.iter().copied().chain(std::iter::once(id)).collect();
        ids.sort_unstable();
        ids.dedup();
        let replicas = ids.into_iter().map(|j| (j, vec![T::zero(); d])).collect();
        Self { id, m: vec![T::zero(); d], x: x0, replicas }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn replica(&self, j: usize) -> Option<&[T]> {
        self.slot(j).map(|s| self.replicas[s].1.as_slice())
    }

    /// Ids covered by the replica table, self included.
    pub fn replica_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.replicas.iter().map(|(j, _)| *j)
    }

    fn slot(&self, j: usize) -> Option<usize> {
        self.replicas.binary_search_by_key(&j, |(id, _)| *id).ok()
    }
}

/// Step sizes and sparsity used by [`agent_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams<T> {
    pub alpha: T,
    pub gamma: T,
    pub beta: T,
    pub k: usize,
}

/// Clipped stochastic gradient and its noise, present only when active.
#[derive(Debug, Clone, Copy)]
pub struct LocalUpdate<'a, T> {
    pub grad: &'a [T],
    pub noise: &'a [T],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub message: Option<SparseUpdate<T>>,
}

/// One agent's update for a round.
///
/// Active (`update` present):
/// `m+ = g + theta + beta m`, `x+ = x - alpha m+ + gamma sum_j w_ij (x_hat_j - x_hat_i)`,
/// message `top_k(x+ - x_hat_i)`.
/// Inactive: `m+ = beta m`, `x+ = x + gamma sum_j w_ij (x_hat_j - x_hat_i)`, no message.
///
/// `weights` lists `(j, w_ij)` for the neighbours of the agent.
pub fn agent_step<T: Scalar>(
    state: &AgentState<T>,
    update: Option<LocalUpdate<'_, T>>,
    weights: &[(usize, T)],
    params: &StepParams<T>,
) -> Result<StepOutput<T>> {
    let d = state.dim();
    let own = state
        .replica(state.id)
        .ok_or(Error::UnknownSender { agent: state.id, sender: state.id })?;
    let mut mix = vec![T::zero(); d];
    for &(j, w) in weights {
        let other = state.replica(j).ok_or(Error::UnknownSender { agent: state.id, sender: j })?;
        for ((acc, xj), xi) in mix.iter_mut().zip(other).zip(own) {
            *acc += w * (*xj - *xi);
        }
    }

    let StepParams { alpha, gamma, beta, k } = *params;
    match update {
        Some(LocalUpdate { grad, noise }) => {
            if grad.len() != d || noise.len() != d {
                return Err(Error::Dimension { expected: d, got: grad.len().min(noise.len()) });
            }
            let m: Vec<T> = grad
                .iter()
                .zip(noise)
                .zip(&state.m)
                .map(|((&g, &th), &mi)| g + th + beta * mi)
                .collect();
            let x: Vec<T> = state
                .x
                .iter()
                .zip(&m)
                .zip(&mix)
                .map(|((&xi, &mi), &c)| xi - alpha * mi + gamma * c)
                .collect();
            let diff: Vec<T> = x.iter().zip(own).map(|(&a, &b)| a - b).collect();
            let message = top_k(&diff, k)?;
            Ok(StepOutput { x, m, message: Some(message) })
        }
        None => {
            let m = state.m.iter().map(|&mi| beta * mi).collect();
            let x = state.x.iter().zip(&mix).map(|(&xi, &c)| xi + gamma * c).collect();
            Ok(StepOutput { x, m, message: None })
        }
    }
}

/// Advances the replica of `sender` by its message, if it sent one.
pub fn replica_apply<T: Scalar>(state: &mut AgentState<T>, sender: usize, message: Option<&SparseUpdate<T>>) -> Result<()> {
    let slot = state
        .slot(sender)
        .ok_or(Error::UnknownSender { agent: state.id, sender })?;
    if let Some(s) = message {
        s.add_to(&mut state.replicas[slot].1)?;
    }
    Ok(())
}
