//! Seed derivation.
//!
//! Every random choice in the crate flows from a master seed through
//! [`derive_seed`], a SplitMix64 mix over a tuple of small integers, and is
//! then consumed by a ChaCha8 stream. Because derived seeds depend only on the
//! tuple (never on scheduling), results are identical across thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags used when deriving learner seeds.
pub const ROLE_ODDS: u64 = 1;
pub const ROLE_REGRESSION: u64 = 2;
pub const ROLE_RATIO: u64 = 3;
pub const ROLE_REPLICATE: u64 = 4;
pub const ROLE_ORACLE: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically mixes a master seed with a list of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Seed for the learner fitting nuisance `role` at `level` in fold `fold`.
pub fn learner_seed(master: u64, fold: usize, role: u64, level: usize) -> u64 {
    derive_seed(master, &[fold as u64, role, level as u64])
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
