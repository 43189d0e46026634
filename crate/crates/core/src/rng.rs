//! Reproducible random streams.
//!
//! Every stochastic routine draws from ChaCha8, a counter-based generator. A
//! base seed selects the key; independent tasks (bootstrap resamples, Monte
//! Carlo replications, simulation stages) select a 64-bit stream number, so a
//! task's draws depend only on `(seed, stream)` and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for task `stream` under base `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed for a nested component (e.g. replication `index` of a
/// Monte Carlo study that itself needs several streams).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.set_word_pos(1 << 20);
    rng.next_u64()
}
