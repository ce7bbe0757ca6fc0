//! Counter-based seed expansion.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is
//! derived from one top-level seed and a path of labels, so components never
//! share (or perturb) each other's streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for the independent random streams.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const EVAL_NEGATIVES: u64 = 3;
    pub const SELECT_NEGATIVES: u64 = 4;
    pub const GENERATE: u64 = 5;
    pub const CONTINUOUS: u64 = 6;
    pub const CLONE: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const NEGATIVES: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
    pub const WORLD: u64 = 11;
    pub const LOG: u64 = 12;
    pub const RANDOMIZED: u64 = 13;
    pub const REFRESH: u64 = 14;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a path of counters.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// A ChaCha8 generator for the stream at `path` below `seed`.
pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
