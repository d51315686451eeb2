//! Stable, platform-independent hashing for deterministic mock behaviour.

/// 64-bit FNV-1a over `bytes`, seeded, with a SplitMix64 finalizer.
pub fn stable_hash64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash to `[0, 1)` using its top 53 bits.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        assert_eq!(stable_hash64(0, b"abc"), stable_hash64(0, b"abc"));
        assert_ne!(stable_hash64(0, b"abc"), stable_hash64(1, b"abc"));
        assert_ne!(stable_hash64(0, b"abc"), stable_hash64(0, b"abd"));
        let u = unit_interval(u64::MAX);
        assert!(u < 1.0 && u > 0.999);
    }
}
