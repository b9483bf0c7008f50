//! Deterministic seed fan-out: one global seed feeds every stochastic stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags mixed into derived seeds.
pub mod stage {
    pub const KERNELS: u64 = 1;
    pub const MASK: u64 = 2;
    pub const SCHEDULE: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const ALIGN: u64 = 5;
    pub const RECONSTRUCT: u64 = 6;
    pub const IMAGES: u64 = 7;
    pub const PROFILE: u64 = 8;
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a path of identifiers
/// (stage, image index, kernel index, ...).
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
