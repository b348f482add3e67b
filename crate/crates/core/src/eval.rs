//! Leave-one-out full-ranking metrics and the inference timing harness.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::SplitDataset;
use crate::error::{Error, Result};
use crate::reward_model::{ReasonBank, RewardModel, TextFeatures};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

fn check(rank: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if rank == 0 {
        return Err(Error::Config("ranks are 1-based".into()));
    }
    Ok(())
}

pub fn recall_at_k(rank: usize, k: usize) -> Result<f64> {
    check(rank, k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check(rank, k)?;
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

/// 1-based position of `target` when items are sorted by descending score,
/// ties broken by ascending index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &s)| s > t || (s == t && j < target)).count()
}

/// Scores every catalog item for a test user.
pub trait Scorer: Sync {
    fn score_user(&self, user: usize) -> Result<Vec<f64>>;
}

impl<F: Fn(usize) -> Result<Vec<f64>> + Sync> Scorer for F {
    fn score_user(&self, user: usize) -> Result<Vec<f64>> {
        self(user)
    }
}

/// Scores with a trained model, the user's training sequence, pattern and
/// every item's reason list.
pub struct ModelScorer<'a> {
    model: &'a RewardModel,
    split: &'a SplitDataset,
    features: &'a TextFeatures,
    bank: Option<ReasonBank>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a RewardModel, split: &'a SplitDataset, features: &'a TextFeatures) -> Result<Self> {
        let bank = if model.config().use_match {
            Some(ReasonBank::build(&features.reasons, model.config().dim)?)
        } else {
            None
        };
        Ok(Self { model, split, features, bank })
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_user(&self, user: usize) -> Result<Vec<f64>> {
        let history = &self.split.train[user].items;
        self.model.score_all(history, &self.features.patterns[user], self.bank.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
    /// Users scored with the empty-pattern fallback.
    pub missing_patterns: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("k\trecall\tndcg\tusers\n");
        for (p, k) in self.ks.iter().enumerate() {
            s.push_str(&format!("{k}\t{}\t{}\t{}\n", self.recall[p], self.ndcg[p], self.users));
        }
        s
    }
}

/// Ranks of each test user's held-out item under `scorer`, in user order.
pub fn test_ranks(scorer: &dyn Scorer, split: &SplitDataset) -> Result<Vec<usize>> {
    let n = split.n_items();
    (0..split.n_users())
        .into_par_iter()
        .map(|u| {
            let scores = scorer.score_user(u)?;
            if scores.len() != n {
                return Err(Error::Config(format!("scorer returned {} scores for {n} items", scores.len())));
            }
            Ok(rank_of(&scores, split.test[u].item))
        })
        .collect()
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> Result<MetricsReport> {
    let n = ranks.len().max(1) as f64;
    let mut recall = Vec::with_capacity(ks.len());
    let mut ndcg = Vec::with_capacity(ks.len());
    for &k in ks {
        let (mut r, mut g) = (0.0, 0.0);
        for &rank in ranks {
            r += recall_at_k(rank, k)?;
            g += ndcg_at_k(rank, k)?;
        }
        recall.push(r / n);
        ndcg.push(g / n);
    }
    Ok(MetricsReport { ks: ks.to_vec(), recall, ndcg, users: ranks.len(), missing_patterns: 0 })
}

pub fn evaluate(scorer: &dyn Scorer, split: &SplitDataset, ks: &[usize]) -> Result<MetricsReport> {
    metrics_from_ranks(&test_ranks(scorer, split)?, ks)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub cores: usize,
    pub threads: usize,
    pub profile: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: rayon::current_num_threads(),
            profile: if cfg!(debug_assertions) { "debug" } else { "release" }.into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_seconds_per_sample: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub timed_batches: usize,
    pub timed_samples: usize,
    pub environment: Environment,
}

/// Wall-clock seconds per scored user. Batches are consecutive runs of
/// `users` (wrapping around); the first `warmup` batches are not timed and the
/// next `ceil(|users| / batch_size)` are.
pub fn timing_benchmark(scorer: &dyn Scorer, users: &[usize], batch_size: usize, warmup: usize) -> Result<TimingReport> {
    if users.is_empty() || batch_size == 0 {
        return Err(Error::Config("timing needs at least one user and a positive batch size".into()));
    }
    let timed = users.len().div_ceil(batch_size);
    let batch = |b: usize| -> Vec<usize> { (0..batch_size).map(|k| users[(b * batch_size + k) % users.len()]).collect() };
    let run = |ids: &[usize]| -> Result<()> {
        let out: Result<Vec<Vec<f64>>> = ids.par_iter().map(|&u| scorer.score_user(u)).collect();
        std::hint::black_box(out?);
        Ok(())
    };
    for b in 0..warmup {
        run(&batch(b))?;
    }
    let mut seconds = 0.0;
    for b in warmup..warmup + timed {
        let ids = batch(b);
        let start = Instant::now();
        run(&ids)?;
        seconds += start.elapsed().as_secs_f64();
    }
    let samples = timed * batch_size;
    Ok(TimingReport {
        mean_seconds_per_sample: seconds / samples as f64,
        batch_size,
        warmup,
        timed_batches: timed,
        timed_samples: samples,
        environment: Environment::current(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(recall_at_k(1, 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(1, 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(3, 5).unwrap(), 0.5);
        assert_eq!((recall_at_k(7, 5).unwrap(), ndcg_at_k(7, 5).unwrap()), (0.0, 0.0));
        assert!(recall_at_k(1, 0).is_err());
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        let s = [0.5, 0.9, 0.5, 0.5];
        assert_eq!(rank_of(&s, 0), 2);
        assert_eq!(rank_of(&s, 2), 3);
        assert_eq!(rank_of(&s, 3), 4);
        assert_eq!(rank_of(&s, 1), 1);
    }
}
