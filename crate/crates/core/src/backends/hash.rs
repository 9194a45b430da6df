//! Hash-seeded value noise shared by the mock backends.
//!
//! Every generator in [`super::mock`] is a pure function of these primitives,
//! so an independent implementation in another language can reproduce mock
//! responses bit for bit.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one hash: `h = splitmix64(h ^ p)` starting from the golden ratio.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |h, &p| splitmix64(h ^ p))
}

/// Top 24 bits as a float in `[0, 1)`; exact in `f32`.
pub fn unit(h: u64) -> f32 {
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Value in `[-1, 1)`.
pub fn signed(h: u64) -> f32 {
    2.0 * unit(h) - 1.0
}

/// 64-bit FNV-1a over UTF-8 bytes.
pub fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
