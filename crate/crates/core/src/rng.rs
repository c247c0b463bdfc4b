//! Seeded random streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` derived from a
//! root seed plus a path of integers (epoch, step, sample index, ...). Two
//! streams with distinct paths are independent, and any stream can be
//! recreated without replaying the ones before it, which is what makes
//! checkpoint resume and parallel loading deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit key from a root seed and a path.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Independent stream for `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_key(seed, path))
}

/// Stable 64-bit hash of a string, used to key streams by video id.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
