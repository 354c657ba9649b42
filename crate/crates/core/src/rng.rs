//! Deterministic random-number plumbing shared by the generator, the
//! detection-noise model, and the benchmark harness.
//!
//! All randomness flows from explicit 64-bit seeds through ChaCha8, which is
//! stable across platforms and releases, so identical seeds reproduce
//! identical scenes, rollouts, and benchmark CSVs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a parent seed and a stream index
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash arbitrary text into a seed, for scripted providers.
pub fn seed_from_text(seed: u64, text: &str) -> u64 {
    let mut acc = seed ^ 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        acc ^= b as u64;
        acc = acc.wrapping_mul(0x1000_0000_01b3);
    }
    derive_seed(acc, 1)
}
