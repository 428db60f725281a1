//! Seed derivation shared by every generator and sampler.
//!
//! Streams are `ChaCha8Rng` seeded from a 64-bit value. Child streams for
//! ensemble member `k` use `child_seed(base, k)`:
//!
//! ```text
//! child_seed(base, k) = splitmix64(splitmix64(base) ^ splitmix64(k + 0x632b_e59b_d9b4_e019))
//! ```
//!
//! The scheme name [`CHILD_SEED_SCHEME`] is written into sample metadata.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

pub const CHILD_SEED_SCHEME: &str = "splitmix64-xor/chacha8";

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn child_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` independent standard normal draws.
pub fn normals<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
