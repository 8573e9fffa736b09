//! Stateless seed derivation so that every random stream is addressable by
//! its coordinates (run, epoch, sample, view) rather than by call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of integers into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for one training sample.
pub fn sample_seed(run_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    derive(&[run_seed, epoch, sample_index])
}
