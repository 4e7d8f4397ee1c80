//! Seed derivation for independent, reproducible random streams.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Seed of sub-stream `stream` of `base`. Distinct streams of the same base
/// get well-mixed, unrelated seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut mixer = SplitMix64::seed_from_u64(base);
    let a = mixer.next_u64();
    SplitMix64::seed_from_u64(a ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)).next_u64()
}
