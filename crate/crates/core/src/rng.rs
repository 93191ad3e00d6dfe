//! Seed derivation.
//!
//! Every random stream in a run is keyed by a path of integers hashed down from
//! the master seed, e.g. `(master, CLIENT, round, client_id, epoch)`. A stream
//! never depends on which thread consumes it or on the order other streams were
//! consumed, so serial and parallel execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct tags keep unrelated streams apart even when the
/// remaining path components collide.
pub mod tag {
    pub const INIT: u64 = 0x494e_4954;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const CLIENT: u64 = 0x434c_4e54;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const DATA: u64 = 0x4441_5441;
    pub const FIGURE1: u64 = 0x4649_4731;
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `path` into `seed`, one component at a time.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_from(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
