//! Seed derivation so that every task owns an independent, reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TaskRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a master seed with a path of task identifiers.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(master), |acc, &id| mix64(acc ^ mix64(id)))
}

pub fn task_rng(master: u64, path: &[u64]) -> TaskRng {
    TaskRng::seed_from_u64(derive_seed(master, path))
}

/// Stream identifiers used throughout the crate.
pub mod stream {
    pub const SLOT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const EM_ITERATION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PSEUDO_ITERATION: u64 = 5;
    pub const CORRUPTION: u64 = 6;
    pub const SCATTERER: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = task_rng(7, &[1, 2]).random();
        let b: u64 = task_rng(7, &[1, 2]).random();
        let c: u64 = task_rng(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
