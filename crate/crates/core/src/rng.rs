//! Reproducible random streams.
//!
//! Every replication owns one `Xoshiro256PlusPlus` stream. Its 64-bit seed is
//! the `(index + 1)`-th output of a SplitMix64 generator started at the master
//! seed, and `seed_from_u64` expands that seed into generator state with
//! SplitMix64 again. Both steps use only the published SplitMix64 constants,
//! so the streams can be reproduced outside Rust.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `index` under `master`.
pub fn replication_seed(master: u64, index: u64) -> u64 {
    splitmix64_mix(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub fn stream(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub fn replication_stream(master: u64, index: u64) -> StreamRng {
    stream(replication_seed(master, index))
}
