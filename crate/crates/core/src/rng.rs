//! Seed derivation for independent deterministic RNG streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; decorrelates derived seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a derived stream, e.g. `(base, case_index)` or `(base, epoch, batch)`.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    let mut s = mix(base);
    for &p in parts {
        s = mix(s ^ mix(p));
    }
    s
}

/// The engine's RNG. Explicit seed everywhere; never seeded from entropy.
pub fn stream(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a: u64 = stream(derive(7, &[0])).gen();
        let b: u64 = stream(derive(7, &[0])).gen();
        let c: u64 = stream(derive(7, &[1])).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
