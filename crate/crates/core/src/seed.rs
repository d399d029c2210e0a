//! Named sub-seeds derived from one top-level seed.
//!
//! Every random stage (folds, k-means, GMM, synthesis) draws from its own
//! stream so it can be rerun in isolation and still reproduce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed for the stage `name`, instance `index`.
pub fn sub_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name)) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    rng(sub_seed(seed, name, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_separate_streams() {
        assert_ne!(sub_seed(7, "kmeans", 0), sub_seed(7, "gmm", 0));
        assert_ne!(sub_seed(7, "kmeans", 0), sub_seed(7, "kmeans", 1));
        assert_eq!(sub_seed(7, "folds", 3), sub_seed(7, "folds", 3));
    }
}
