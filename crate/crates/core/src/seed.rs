//! Counter-based seed derivation.
//!
//! Every stochastic stage draws its RNG from `derive(global_seed, stage, item)`
//! so that stages and items are reproducible independently of execution order
//! or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable across platforms and compiler versions, unlike `DefaultHasher`.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn derive(seed: u64, stage: &str, item: u64) -> u64 {
    splitmix64(splitmix64(seed ^ hash_str(stage)).wrapping_add(item))
}

pub fn rng(seed: u64, stage: &str, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stage, item))
}
