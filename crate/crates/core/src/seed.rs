//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from one of the configured base
//! seeds plus a list of integer tags (iteration, step, prompt id, ...), so that
//! any stream can be regenerated without storing it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix `tags` into `base`. Distinct tag lists give statistically unrelated seeds.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags, kept in one place so two subsystems never share a stream.
pub mod tag {
    pub const INIT_POLICY: u64 = 1;
    pub const INIT_HEAD: u64 = 2;
    pub const ENV_FEATURES: u64 = 10;
    pub const ENV_UTILITY: u64 = 11;
    pub const ENV_HELDOUT: u64 = 12;
    pub const ROLLOUT: u64 = 20;
    pub const SHUFFLE: u64 = 21;
    pub const NOISE: u64 = 30;
    pub const COLLECT: u64 = 40;
    pub const JUDGE: u64 = 41;
    pub const REFINE: u64 = 42;
    pub const AGREEMENT: u64 = 43;
    pub const PRETRAIN: u64 = 44;
}
