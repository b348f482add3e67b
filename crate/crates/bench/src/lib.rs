//! Synthetic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reasonrec::reward_model::{ReasonBank, RewardModel, RewardModelConfig, TextFeatures, UserExample};

pub struct Workload {
    pub model: RewardModel,
    pub features: TextFeatures,
    pub bank: ReasonBank,
    pub examples: Vec<UserExample>,
}

/// Random unit-free embeddings for `users` users over `items` items, with
/// up to `max_reasons` reasons per item and histories of `seq_len` items.
pub fn workload(dim: usize, items: usize, users: usize, seq_len: usize, max_reasons: usize) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let patterns = (0..users).map(|_| vec(&mut rng)).collect();
    let reasons: Vec<Vec<Vec<f64>>> =
        (0..items).map(|_| (0..rng.gen_range(0..=max_reasons)).map(|_| vec(&mut rng)).collect()).collect();
    let examples = (0..users)
        .map(|u| {
            let seq: Vec<usize> = (0..=seq_len).map(|_| rng.gen_range(0..items)).collect();
            UserExample { user: u, inputs: seq[..seq_len].to_vec(), targets: seq[1..].to_vec() }
        })
        .collect();
    let cfg = RewardModelConfig { dim, max_seq_len: seq_len.max(1), ..Default::default() };
    let model = RewardModel::new(cfg, items).expect("valid benchmark model");
    let bank = ReasonBank::build(&reasons, dim).expect("valid reason bank");
    Workload { model, features: TextFeatures { patterns, reasons, missing_patterns: 0 }, bank, examples }
}
