//! Named, reproducible random streams.
//!
//! Every random draw in the crate flows from a master seed through a named
//! sub-stream, so adding a consumer in one place never shifts the numbers
//! seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for the stream `name` under `master`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(name.as_bytes())))
}

/// Derives a 64-bit seed for element `index` of the stream `name`.
pub fn derive_indexed_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, name) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name))
}

pub fn indexed_stream(master: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed_seed(master, name, index))
}
