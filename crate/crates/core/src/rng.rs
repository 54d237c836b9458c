//! Named seed streams.
//!
//! All randomness derives from one global seed. Each consumer asks for a
//! stream by name (and optionally an index), so re-seeding one stage never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Well-known stream names.
pub mod stream {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const TRAIN: &str = "train";
    pub const SAMPLE: &str = "sample";
    pub const EVAL: &str = "eval";
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the stream name, mixed with the seed and index.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(seed ^ h).wrapping_add(index))
}

pub fn stream_rng(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, index))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
