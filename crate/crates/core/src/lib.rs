pub mod correction;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod ndkernel;
pub mod pipeline;
pub mod pretrain_reward;
pub mod reward_model;
pub mod textgen;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed and two counters.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
