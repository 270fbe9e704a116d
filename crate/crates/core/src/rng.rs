//! Seeding conventions.
//!
//! Every random draw in the crate comes from a ChaCha8 generator seeded
//! with a 64-bit value. Independent consumers of the same seed (graph
//! topology, cost coefficients, initial conditions) read from distinct
//! ChaCha streams so that adding draws to one never shifts another.
//!
//! Per-trial seeds in a batch are derived as
//! `splitmix64(master ^ splitmix64(trial_index + 1))`, which depends only on
//! the pair `(master, trial_index)` and can be computed in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used for graph topology draws.
pub const STREAM_GRAPH: u64 = 0;
/// Stream used for cost coefficient draws.
pub const STREAM_PROBLEM: u64 = 1;
/// Stream used for random initial conditions.
pub const STREAM_INITIAL: u64 = 2;
/// Stream used by test-style instance generators (verification suites).
pub const STREAM_AUX: u64 = 3;

/// One step of the SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for trial `index` of a batch driven by `master`.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
