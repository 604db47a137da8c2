//! Named random streams derived from one root seed.
//!
//! Every consumer of randomness (data generation, adapter init, attack random
//! starts, shuffling) draws from its own stream so that re-seeding one of
//! them leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const ATTACK: &str = "attack";
pub const SHUFFLE: &str = "shuffle";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for `(root, name)`; FNV-1a over the name, mixed with the root.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name))
}

/// Sub-stream keyed by an additional index (per layer, per batch, ...).
pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(derive_seed(root, name) ^ splitmix64(index)))
}
