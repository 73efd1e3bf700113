//! Seed-derived RNG streams so every frame, agent and iteration draws from
//! its own reproducible generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags keep unrelated consumers of the same seed apart.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Segment = 1,
    FrameSampling = 2,
    PoseNoise = 3,
    Augment = 4,
    Negatives = 5,
    TestScene = 6,
}

pub fn stream(seed: u64, tag: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ tag as u64);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(h)
}

/// A child seed for an independent consumer, such as a held-out scene.
pub fn derive_seed(seed: u64, tag: Stream, a: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag as u64) ^ a)
}
