//! Seeded, stream-separated random number generators.
//!
//! Every consumer of randomness asks for its own ChaCha stream keyed by the
//! run seed and a fixed stream tag, so adding draws in one component never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub mod streams {
    pub const PARTITION: u64 = 1;
    pub const TEST_ALLOCATION: u64 = 2;
    pub const CLIENT_SAMPLING: u64 = 3;
    pub const TUNING_INIT: u64 = 4;
    pub const BACKBONE_INIT: u64 = 5;
    pub const PRETRAIN_SHUFFLE: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
    pub const PROTOTYPES: u64 = 8;
    /// Base of per-client local-training streams; client `c` uses `LOCAL_TRAINING + c`.
    pub const LOCAL_TRAINING: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a run seed with a round or client index into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
