//! Seed derivation. Every stochastic operation takes an explicit RNG or seed.
//!
//! Child seeds are derived with SplitMix64 over `(base, stream, index)`:
//! `child = splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)`.
//! Trajectory `i` of a sampling batch with seed `s` uses
//! `derive_seed(s, STREAM_TRAJECTORY, i)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub const STREAM_TRAJECTORY: u64 = 0x7472_616a;
pub const STREAM_TRAIN_SAMPLE: u64 = 0x7472_6169;
pub const STREAM_INIT: u64 = 0x696e_6974;
pub const STREAM_SCENE: u64 = 0x7363_656e;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, STREAM_TRAJECTORY, 0);
        assert_eq!(a, derive_seed(7, STREAM_TRAJECTORY, 0));
        assert_ne!(a, derive_seed(7, STREAM_TRAJECTORY, 1));
        assert_ne!(a, derive_seed(7, STREAM_TRAIN_SAMPLE, 0));
        assert_ne!(a, derive_seed(8, STREAM_TRAJECTORY, 0));
    }
}
