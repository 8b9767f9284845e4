//! Splittable seed derivation.
//!
//! Every random stream in the toolkit is keyed by the master seed and a path
//! of structural indices (for example `[SCHEMA, seed_index, strategy, phase,
//! replica]`). The derived seed is
//!
//! ```text
//! h0 = splitmix64(master)
//! h_{k+1} = splitmix64(h_k ^ splitmix64(index_k + 0x9E3779B97F4A7C15))
//! ```
//!
//! so a stream depends only on its key, never on the order in which jobs are
//! scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |h, &idx| {
        splitmix64(h ^ splitmix64(idx.wrapping_add(0x9E37_79B9_7F4A_7C15)))
    })
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream tags used as the first path element so unrelated consumers of the
/// same master seed never collide.
pub mod stream {
    pub const HOLDOUT: u64 = 1;
    pub const SUBSET: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const RASHOMON: u64 = 4;
    pub const ABSTAIN: u64 = 5;
    pub const LEARNER: u64 = 6;
    pub const COHORT: u64 = 7;
    pub const TRACE: u64 = 8;
}
