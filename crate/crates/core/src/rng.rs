//! Seed fan-out. One master seed derives every module's stream through a
//! fixed hash of the module name, so outputs never depend on call order
//! between modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed for `name` from `seed`.
pub fn derive(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ fnv1a(name.as_bytes()))
}

/// Derives a sub-seed for `name` and an index (step, worker, fold ...).
pub fn derive_indexed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(derive(seed, name) ^ splitmix64(index))
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, name))
}

pub fn stream_indexed(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, name, index))
}
