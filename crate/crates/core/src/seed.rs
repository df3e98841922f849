//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is keyed by a tuple of integers
//! (base seed, ROI id, image index, ...), so results never depend on the
//! order in which parallel workers pick up work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of keys into a single 64-bit seed.
pub fn derive_seed(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// A ChaCha8 generator seeded from [`derive_seed`].
pub fn rng_for(keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(keys))
}
