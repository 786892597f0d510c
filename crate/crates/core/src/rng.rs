//! Seeded, platform-independent randomness.
//!
//! Every random draw in the crate goes through [`Rng`], which is
//! xoshiro256** seeded through splitmix64 (`seed_from_u64`). Per-episode
//! generators are derived with [`mix_seed`], so episode `i` of a run only
//! depends on `(seed, i)` and can be evaluated on any worker.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 output step applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(seed ^ splitmix64(index))`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn for_stream(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(mix_seed(seed, index))
}
