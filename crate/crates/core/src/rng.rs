//! Deterministic seeding helpers. Every stochastic decode owns its own
//! ChaCha stream so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a token-id slice, keyed by `seed`.
pub fn hash_ids(seed: u64, ids: &[usize]) -> u64 {
    let mut h = mix64(seed ^ 0x5EED);
    for &id in ids {
        h = mix64(h ^ id as u64);
    }
    mix64(h ^ ids.len() as u64)
}

/// Per-example seed derived from the run seed and the example id.
pub fn derive_seed(base: u64, example_id: &str) -> u64 {
    // FNV-1a over the id bytes, then mixed with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in example_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(base ^ mix64(h))
}

pub fn decode_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps a hash to a uniform draw in `[0, 1)` using its top 53 bits.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_id_sensitive() {
        assert_eq!(derive_seed(7, "ex1"), derive_seed(7, "ex1"));
        assert_ne!(derive_seed(7, "ex1"), derive_seed(7, "ex2"));
        assert_ne!(derive_seed(7, "ex1"), derive_seed(8, "ex1"));
    }

    #[test]
    fn hash_distinguishes_length() {
        assert_ne!(hash_ids(1, &[0]), hash_ids(1, &[0, 0]));
        assert!((0.0..1.0).contains(&unit_interval(u64::MAX)));
    }
}
