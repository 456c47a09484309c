//! Seeded randomness. Every stochastic operation takes an explicit source;
//! independent streams are derived from a base seed with a stable mix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `stream`-th independent substream of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix64(mix64(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn derived(base: u64, stream: u64) -> SeededRng {
    seeded(derive_seed(base, stream))
}

/// Seed derived from a base seed and a text tag (e.g. a sample id).
pub fn derive_seed_str(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then mixed with the base
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive_seed(base, h)
}

/// Deterministic value in `[-1, 1]` from integer coordinates.
#[inline]
pub fn hash_unit(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let h = mix64(a ^ mix64(b ^ mix64(c ^ mix64(d))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}
