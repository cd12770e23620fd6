//! Stateless RNG derivation. Every random draw in a run comes from a
//! generator keyed by (run seed, stream, index), so the batch at step k or
//! the sample in grid cell (i, j) is a pure function of those numbers and
//! nothing needs to serialize RNG state to resume.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of the same run seed disjoint.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const CORPUS: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const EVAL: u64 = 5;
}

/// splitmix64-style finalizer over the three keys.
pub fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed;
    for salt in [stream, index, 0x9e37_79b9_7f4a_7c15] {
        z = z.wrapping_add(salt).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub fn rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream, index))
}
