//! Seeded generators.
//!
//! Parallel loops never share a generator; each task derives its own from a
//! master seed and a task index, so results do not depend on worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a seed together with a path of indices into a new seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

pub fn derive_rng(seed: u64, path: &[u64]) -> Rng64 {
    Rng64::seed_from_u64(derive_seed(seed, path))
}

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}
