//! Deterministic seed derivation.
//!
//! Every stochastic step (factor fit, pair sampling, fold assignment) gets
//! its own RNG stream keyed by a base seed and a small tuple of context
//! words, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each context word in turn.
pub fn derive(base: u64, context: &[u64]) -> u64 {
    context
        .iter()
        .fold(splitmix(base), |acc, &word| splitmix(acc ^ splitmix(word)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Context tags, kept distinct so streams never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PAIRS: u64 = 2;
    pub const NODE: u64 = 3;
    pub const CANDIDATE: u64 = 4;
    pub const PERSONAL: u64 = 5;
    pub const MF: u64 = 6;
    pub const FOLDS: u64 = 7;
    pub const SPLIT: u64 = 8;
    pub const SYNTH: u64 = 9;
    pub const ALTERNATION: u64 = 10;
}
