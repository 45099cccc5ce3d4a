//! Seed derivation and the RNG used everywhere in the pipeline.
//!
//! Every random stream is a `ChaCha8Rng` seeded from a `u64`. Child seeds are
//! derived with a counter-based mix so that record `i` of a dataset gets the
//! same seed no matter how the work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child stream of `base`.
pub fn split(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(index.wrapping_add(0x6A09_E667_F3BC_C909)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_is_stable_and_distinct() {
        assert_eq!(split(7, 3), split(7, 3));
        let seeds: HashSet<u64> = (0..10_000).map(|i| split(42, i)).collect();
        assert_eq!(seeds.len(), 10_000);
        assert_ne!(split(1, 0), split(0, 1));
    }
}
