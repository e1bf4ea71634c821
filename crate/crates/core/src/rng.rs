//! Deterministic seed derivation.
//!
//! Every stochastic component takes a 64-bit seed and derives independent
//! sub-streams with [`derive_seed`], so identical seeds always reproduce
//! identical outputs regardless of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-period mixing of a 64-bit state.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from `(seed, salt)`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// A deterministic RNG for the sub-stream identified by `salt`.
pub fn sub_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, salt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn sub_streams_are_deterministic_and_distinct() {
        let mut a1 = sub_rng(42, 0);
        let mut a2 = sub_rng(42, 0);
        let mut b = sub_rng(42, 1);
        let xs1: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let xs2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn salt_zero_differs_from_raw_seed() {
        assert_ne!(derive_seed(7, 0), 7);
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
    }
}
