//! Keyed seed derivation so that draws never depend on generation order.

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix_seed(seed: u64, key: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ key.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// 64-bit FNV-1a over a string.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for the draw identified by `(seed, label, index)`.
pub fn keyed_seed(seed: u64, label: &str, index: u64) -> u64 {
    mix_seed(mix_seed(seed, hash_str(label)), index)
}
