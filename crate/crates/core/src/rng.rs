//! Counter-based pseudorandomness.
//!
//! Every random quantity in the crate is a pure function of a 64-bit seed and
//! a counter, so sample streams, partitions and per-trial seeds are portable
//! test vectors.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `counter`-th output of the SplitMix64 sequence started at `seed`.
#[inline]
pub fn counter_u64(seed: u64, counter: u64) -> u64 {
    mix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Uniform double in [0, 1) with 53 random bits.
#[inline]
pub fn counter_unit(seed: u64, counter: u64) -> f64 {
    (counter_u64(seed, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives an independent child seed, e.g. for trial `index` of a master seed.
#[inline]
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    mix64(mix64(parent ^ 0x5851_F42D_4C95_7F2D).wrapping_add(index.wrapping_mul(GOLDEN_GAMMA)))
}
