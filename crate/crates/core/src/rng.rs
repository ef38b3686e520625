//! Keyed random streams. Every consumer of randomness derives its own
//! generator from `(seed, stream name, indices)`, so adding draws in one
//! place never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn derive_seed(seed: u64, stream: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(stream));
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream_rng(seed: u64, stream: &str, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, parts))
}
