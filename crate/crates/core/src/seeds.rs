//! Deterministic seed derivation for parallel work.
//!
//! Every randomized routine in this crate owns a base seed and hands each
//! independent unit of work (a bootstrap replicate, a rollout, a k-means
//! restart, ...) its own ChaCha stream derived from `(base, domain, index)`.
//! Because the stream only depends on those three values and never on
//! scheduling, results are bit-identical no matter how many worker threads
//! execute the units or in which order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint even when they
/// share a base seed and an index.
pub mod domain {
    pub const KMEANS_RESTART: u64 = 0x01;
    pub const SPLIT_SHUFFLE: u64 = 0x02;
    pub const BOOTSTRAP_REP: u64 = 0x03;
    pub const ROLLOUT_TRAJ: u64 = 0x04;
    pub const SYNTH_ROW: u64 = 0x05;
    pub const SYNTH_BEHAVIOR: u64 = 0x06;
    pub const SYNTH_TRAJ: u64 = 0x07;
    pub const FOREST_TREE: u64 = 0x08;
    pub const FOREST_SPLIT: u64 = 0x09;
    pub const FOREST_PERMUTE: u64 = 0x0a;
    pub const SYNTH_LATTICE: u64 = 0x0b;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a base seed, a domain tag, and a stream index.
pub fn derive(base: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(domain)) ^ index)
}

/// A ChaCha generator for one unit of work.
pub fn stream_rng(base: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, domain, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_stable() {
        // Pinned so that a refactor that silently changes stream assignment
        // (and therefore every seeded artifact) fails loudly.
        assert_eq!(
            derive(1, 2, 3),
            splitmix64(splitmix64(1 ^ splitmix64(2)) ^ 3)
        );
        let a = derive(42, domain::BOOTSTRAP_REP, 7);
        let b = derive(42, domain::BOOTSTRAP_REP, 7);
        assert_eq!(a, b);
        assert_ne!(a, derive(42, domain::BOOTSTRAP_REP, 8));
        assert_ne!(a, derive(42, domain::ROLLOUT_TRAJ, 7));
        assert_ne!(a, derive(43, domain::BOOTSTRAP_REP, 7));
    }

    #[test]
    fn streams_are_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for d in 1..=10 {
            for i in 0..100 {
                assert!(
                    seen.insert(derive(1234, d, i)),
                    "collision at domain {d} index {i}"
                );
            }
        }
    }

    #[test]
    fn rng_reproduces() {
        let mut a = stream_rng(9, domain::ROLLOUT_TRAJ, 3);
        let mut b = stream_rng(9, domain::ROLLOUT_TRAJ, 3);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }
}
