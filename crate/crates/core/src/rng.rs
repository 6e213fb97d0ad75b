//! Keyed random streams.
//!
//! Every random draw in a simulation comes from a stream keyed by
//! `(seed, agent, iteration, purpose)`. Streams with distinct keys are
//! independent ChaCha instances, so draws do not depend on the order in which
//! agents are processed or on how many worker threads are used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Activation = 1,
    DataSample = 2,
    Noise = 3,
    Dataset = 4,
    Problem = 5,
    Partition = 6,
}

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64, agent: u64, iteration: u64, purpose: Purpose) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&agent.to_le_bytes());
    key[16..24].copy_from_slice(&iteration.to_le_bytes());
    key[24..32].copy_from_slice(&(purpose as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
