//! Seeded random streams.
//!
//! Every stochastic entry point takes an explicit `u64` seed. Parallel callers
//! derive independent child seeds with [`derive_seed`] so results do not depend
//! on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

pub fn rng(seed: u64) -> SimRng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// SplitMix64 mix of a parent seed and a child index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
