//! Seeded, portable randomness. Every stochastic step in the pipeline draws
//! from a xoshiro256++ stream derived from the run seed and a fixed tag.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Recorded in run metadata so experiments can be replayed.
pub const RNG_NAME: &str = "xoshiro256++ (seed_from_u64, splitmix64 sub-seeds)";

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seed for a named purpose.
pub fn derive(seed: u64, tag: &str) -> u64 {
    tag.bytes()
        .fold(splitmix64(seed), |acc, b| splitmix64(acc ^ b as u64))
}
