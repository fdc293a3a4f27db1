//! Deterministic derivation of independent random streams from one master
//! seed. Each consumer tags its stream, so adding a new consumer never
//! shifts the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a tag sequence into the master seed.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

/// Seeded generator for the stream identified by `tags`.
pub fn rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}
