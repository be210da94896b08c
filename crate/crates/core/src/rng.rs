//! Seed derivation for reproducible parallel runs.
//!
//! Every random stream in an experiment is keyed by the master seed plus a
//! path of labels (purpose, round, client). Streams never depend on the
//! order in which workers consume them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SAMPLING: u64 = 2;
pub const STREAM_CLIENT: u64 = 3;
pub const STREAM_TRANSITIVE: u64 = 4;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a master seed and a label path into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn stream(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}
