//! Named random streams derived from a single run seed.
//!
//! Each component draws from its own stream so toggling one component never
//! shifts another component's random sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SCENE: &str = "scene";
pub const TRAIN: &str = "train";
pub const RANSAC: &str = "ransac";
pub const BUFFER: &str = "buffer";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives the 64-bit seed of stream `name` (optionally indexed) from `seed`.
pub fn stream_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name.as_bytes())) ^ splitmix64(index.wrapping_add(1)))
}

/// A ChaCha8 generator for stream `name`, sub-stream `index`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name, index))
}
