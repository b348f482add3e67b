//! Rule-based reward for recommendation-alignment episodes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{sample_negatives, ItemDescription, SplitDataset};
use crate::error::{Error, Result};
use crate::grpo::{self, GrpoConfig, ReferencePolicy, StepStats};
use crate::textgen::{parse_structured_output, PromptContext, PromptKind, SurrogatePolicy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub format: f64,
    pub legal: f64,
    pub correct: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { format: 0.5, legal: 0.5, correct: 1.0 }
    }
}

impl RewardWeights {
    pub fn max_total(&self) -> f64 {
        self.format + self.legal + self.correct
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateList {
    pub target: usize,
    /// Dense item indices in display order.
    pub items: Vec<usize>,
    pub target_position: usize,
}

impl CandidateList {
    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().copied().filter(move |&i| i != self.target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub legal: u8,
    pub correct: u8,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn gates(&self) -> (u8, u8, u8) {
        (self.format, self.legal, self.correct)
    }
}

/// Target plus `n_negatives` items outside the user's history, shuffled.
pub fn build_candidate_list<R: Rng + ?Sized>(
    history: &HashSet<usize>,
    target: usize,
    n_items: usize,
    n_negatives: usize,
    rng: &mut R,
) -> Result<CandidateList> {
    let mut excluded = history.clone();
    excluded.insert(target);
    let mut items = sample_negatives(&excluded, n_items, n_negatives, rng)?;
    items.push(target);
    items.shuffle(rng);
    let target_position = items.iter().position(|&i| i == target).expect("target was inserted");
    Ok(CandidateList { target, items, target_position })
}

pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn label_of(answer: &str) -> Option<usize> {
    let a = answer.trim();
    let inner = a
        .strip_prefix('(')
        .and_then(|x| x.strip_suffix(')'))
        .or_else(|| a.strip_prefix('[').and_then(|x| x.strip_suffix(']')))
        .unwrap_or(a);
    let n: usize = inner.trim().parse().ok()?;
    n.checked_sub(1)
}

/// Display positions the answer identifies, by title or by 1-based label.
pub fn matching_positions(answer: &str, list: &CandidateList, catalog: &[ItemDescription]) -> Vec<usize> {
    let norm = normalize(answer);
    let mut hits: Vec<usize> = list
        .items
        .iter()
        .enumerate()
        .filter(|(_, &i)| !norm.is_empty() && normalize(&catalog[i].title) == norm)
        .map(|(p, _)| p)
        .collect();
    if let Some(p) = label_of(answer).filter(|&p| p < list.items.len()) {
        if !hits.contains(&p) {
            hits.push(p);
        }
    }
    hits
}

/// Gated scoring: legality requires a parseable output and correctness a legal answer.
pub fn score_output(
    raw: &str,
    list: &CandidateList,
    catalog: &[ItemDescription],
    w: &RewardWeights,
) -> RewardBreakdown {
    let (format, legal, correct) = match parse_structured_output(raw) {
        Err(_) => (0, 0, 0),
        Ok(out) => match matching_positions(&out.answer, list, catalog).as_slice() {
            [p] => (1, 1, u8::from(list.items[*p] == list.target)),
            _ => (1, 0, 0),
        },
    };
    let total = w.format * format as f64 + w.legal * legal as f64 + w.correct * correct as f64;
    RewardBreakdown { format, legal, correct, total }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Negatives per candidate list; the list holds one more item.
    pub n_negatives: usize,
    pub weights: RewardWeights,
    pub grpo: GrpoConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 300, n_negatives: 19, weights: RewardWeights::default(), grpo: GrpoConfig::default(), seed: 5 }
    }
}

/// GRPO on recommendation episodes: a random training prefix, the next item as
/// target and a shuffled candidate list, rewarded by [`score_output`].
pub fn pretrain_policy(split: &SplitDataset, policy: &mut SurrogatePolicy, cfg: &PretrainConfig) -> Result<Vec<StepStats>> {
    cfg.grpo.validate()?;
    let users: Vec<usize> = split.train.iter().filter(|s| s.items.len() >= 2).map(|s| s.user).collect();
    if users.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("pretraining needs a user with at least two training events".into()));
    }
    let reference = ReferencePolicy::snapshot(policy);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, 4, step as u64));
        let u = users[rng.gen_range(0..users.len())];
        let seq = &split.train[u].items;
        let p = rng.gen_range(1..seq.len());
        let list = build_candidate_list(&split.history_set(u), seq[p], split.n_items(), cfg.n_negatives, &mut rng)?;
        let ctx = PromptContext {
            history: Some(seq[..p].iter().map(|&i| &split.catalog[i]).collect()),
            candidates: Some(list.items.iter().map(|&i| &split.catalog[i]).collect()),
            ..Default::default()
        };
        let f = policy.features(&ctx);
        let group = grpo::sample_group(&*policy, &f, &reference, &cfg.grpo, &mut rng, |actions| {
            actions
                .iter()
                .map(|&a| {
                    let raw = policy.instantiate(a, PromptKind::Rec, &ctx)?;
                    let r = score_output(&raw, &list, &split.catalog, &cfg.weights).total;
                    Ok((raw, r))
                })
                .collect()
        })?;
        log.push(grpo::step(policy, &f, &group, &reference, &cfg.grpo)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Vec<ItemDescription> {
        ["Alpha", "Beta", "Gamma", "Delta"]
            .iter()
            .enumerate()
            .map(|(k, t)| ItemDescription {
                item_id: k.to_string(),
                title: t.to_string(),
                text: t.to_string(),
                attributes: vec![],
            })
            .collect()
    }

    fn list() -> CandidateList {
        CandidateList { target: 2, items: vec![1, 2, 3], target_position: 1 }
    }

    #[test]
    fn gating_cases() {
        let c = catalog();
        let w = RewardWeights::default();
        let r = score_output("<think>x</think><answer>gamma</answer>", &list(), &c, &w);
        assert_eq!((r.gates(), r.total), ((1, 1, 1), 2.0));
        let r = score_output("<think>x</think><answer>  DELTA </answer>", &list(), &c, &w);
        assert_eq!(r.gates(), (1, 1, 0));
        let r = score_output("<think>x</think><answer>Alpha</answer>", &list(), &c, &w);
        assert_eq!(r.gates(), (1, 0, 0));
        let r = score_output("<answer>Gamma</answer>", &list(), &c, &w);
        assert_eq!(r.gates(), (0, 0, 0));
        let r = score_output("<think>x</think><answer>(2)</answer>", &list(), &c, &w);
        assert_eq!(r.gates(), (1, 1, 1));
    }

    #[test]
    fn ambiguous_answer_is_illegal() {
        let mut c = catalog();
        c[3].title = "Gamma".into();
        let r = score_output("<think>x</think><answer>Gamma</answer>", &list(), &c, &RewardWeights::default());
        assert_eq!(r.gates(), (1, 0, 0));
    }

    #[test]
    fn candidate_list_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hist: HashSet<usize> = (0..10).collect();
        let l = build_candidate_list(&hist, 3, 100, 0, &mut rng).unwrap();
        assert_eq!(l.items, vec![3]);
        let l = build_candidate_list(&hist, 3, 100, 19, &mut rng).unwrap();
        let uniq: HashSet<usize> = l.items.iter().copied().collect();
        assert_eq!((l.items.len(), uniq.len()), (20, 20));
        assert!(l.negatives().all(|i| !hist.contains(&i)));
        assert_eq!(l.items[l.target_position], 3);
    }
}
