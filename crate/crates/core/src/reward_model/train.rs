use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ReasonBank, RewardModel, TextFeatures};
use crate::datasets::SplitDataset;
use crate::error::{Error, Result};
use crate::ndkernel::{Adam, AdamConfig, Grads, KernelError, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Users per optimiser step.
    pub batch_users: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Uniform negatives per user, shared by its predictions; `None` normalises
    /// over the full catalog.
    pub sampled_negatives: Option<usize>,
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_users: 128, adam: AdamConfig::default(), seed: 11, sampled_negatives: None, max_steps: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of each optimiser step.
    pub step_losses: Vec<f64>,
    /// Mean loss over all predictions of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Next-item targets for one user: `inputs[t]` is followed by `targets[t]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserExample {
    pub user: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// One example per user with at least two training events, using the most
/// recent `max_seq_len + 1` of them.
pub fn user_examples(split: &SplitDataset, max_seq_len: usize) -> Vec<UserExample> {
    split
        .train
        .iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| {
            let w = &s.items[s.items.len().saturating_sub(max_seq_len + 1)..];
            UserExample { user: s.user, inputs: w[..w.len() - 1].to_vec(), targets: w[1..].to_vec() }
        })
        .collect()
}

impl RewardModel {
    /// Mean next-item NLL over one user's predictions.
    ///
    /// With `negatives` (items outside the user's targets, shared by every
    /// row), row `t` is normalised over its target and those items, whose
    /// logits are lowered by `ln(k / (|I| - |targets|))`.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ex: &UserExample,
        pattern: &[f64],
        bank: Option<&ReasonBank>,
        negatives: Option<&[usize]>,
    ) -> Result<Var> {
        if ex.inputs.len() != ex.targets.len() || ex.inputs.is_empty() {
            return Err(Error::Config(format!("user {} has mismatched inputs and targets", ex.user)));
        }
        self.check_items(&ex.targets)?;
        let h = self.sequence_states(tape, vars, &ex.inputs)?;
        let users = self.prediction_rows(tape, h)?;
        let (columns, targets, cols, correction) = match negatives {
            None => (None, ex.targets.clone(), None, 0.0),
            Some(neg) => {
                self.check_items(neg)?;
                let mut distinct = ex.targets.clone();
                distinct.sort_unstable();
                distinct.dedup();
                if let Some(n) = neg.iter().find(|n| distinct.binary_search(n).is_ok()) {
                    return Err(Error::Config(format!("negative {n} is a target of user {}", ex.user)));
                }
                let mut union: Vec<usize> = distinct.iter().chain(neg).copied().collect();
                union.sort_unstable();
                union.dedup();
                let local = |i: &usize| union.binary_search(i).expect("in union");
                let targets: Vec<usize> = ex.targets.iter().map(local).collect();
                let row: Vec<usize> = neg.iter().map(local).collect();
                let pool = (self.n_items - distinct.len()) as f64;
                let correction = (neg.len() as f64 / pool).ln();
                (Some(union), targets, Some(Arc::new(vec![row; ex.targets.len()])), correction)
            }
        };
        let table = vars[self.ids.item_emb.index()];
        let items = match &columns {
            None => table,
            Some(u) => tape.gather_rows(table, Arc::new(u.clone()))?,
        };
        let s = if self.cfg.use_match {
            let bank = bank.ok_or_else(|| Error::Config("matching model needs a reason bank".into()))?;
            self.check_dim(pattern, "pattern embedding")?;
            let q = tape.constant(Tensor::row(pattern.to_vec()));
            Some(self.match_all_taped(tape, vars, q, bank, columns.as_deref())?)
        } else {
            None
        };
        let scores = self.score_matrix_taped(tape, vars, users, items, s)?;
        Ok(tape.nll_rows(scores, Arc::new(targets), cols, correction)?)
    }
}

struct UserGrad {
    loss_sum: f64,
    rows: usize,
    grads: Grads,
}

/// Adam on the mean next-item NLL, batches of users in parallel. Per-user
/// gradients are merged in batch order so results do not depend on the
/// thread count.
pub fn train(
    model: &mut RewardModel,
    examples: &[UserExample],
    features: &TextFeatures,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_users == 0 {
        return Err(Error::Config("batch_users must be positive".into()));
    }
    if features.reasons.len() != model.n_items {
        return Err(Error::Config(format!(
            "features cover {} items, model {}",
            features.reasons.len(),
            model.n_items
        )));
    }
    if let Some(k) = cfg.sampled_negatives {
        if k == 0 || k >= model.n_items {
            return Err(Error::Config(format!("sampled_negatives={k} must lie in 1..{}", model.n_items)));
        }
    }
    let bank = if model.cfg.use_match { Some(ReasonBank::build(&features.reasons, model.cfg.dim)?) } else { None };
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let zero_pattern = vec![0.0; model.cfg.dim];
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_rows) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_users) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let m: &RewardModel = model;
            let results: Vec<Result<UserGrad>> = batch
                .par_iter()
                .map(|&k| {
                    let ex = &examples[k];
                    let pattern = features.patterns.get(ex.user).unwrap_or(&zero_pattern);
                    let negs = match cfg.sampled_negatives {
                        None => None,
                        Some(n) => {
                            let mut r = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, step as u64, ex.user as u64));
                            let mut own = ex.targets.clone();
                            own.sort_unstable();
                            own.dedup();
                            let pool: Vec<usize> = (0..m.n_items).filter(|i| own.binary_search(i).is_err()).collect();
                            if n > pool.len() {
                                return Err(Error::Config(format!(
                                    "user {} leaves {} candidate negatives, {n} requested",
                                    ex.user,
                                    pool.len()
                                )));
                            }
                            Some(rand::seq::index::sample(&mut r, pool.len(), n).into_iter().map(|k| pool[k]).collect::<Vec<_>>())
                        }
                    };
                    let mut tape = Tape::new();
                    let vars = m.params.bind_all(&mut tape, true);
                    let loss = m.sequence_loss(&mut tape, &vars, ex, pattern, bank.as_ref(), negs.as_deref());
                    let loss = loss.map_err(|e| match e {
                        Error::Kernel(KernelError::NonFinite { op }) => Error::Diverged {
                            step,
                            detail: format!("non-finite values entering {op} for user {}", ex.user),
                        },
                        e => e,
                    })?;
                    let rows = ex.targets.len();
                    let total = tape.scale(loss, rows as f64)?;
                    tape.backward(total)?;
                    let mut grads = Grads::zeros_like(&m.params);
                    grads.add_tape(&tape);
                    Ok(UserGrad { loss_sum: tape.value(total).item(), rows, grads })
                })
                .collect();
            let mut grads = Grads::zeros_like(&model.params);
            let (mut loss_sum, mut rows) = (0.0, 0usize);
            for r in results {
                let r = r?;
                loss_sum += r.loss_sum;
                rows += r.rows;
                grads.merge(&r.grads);
            }
            if rows == 0 {
                continue;
            }
            grads.scale(1.0 / rows as f64);
            let loss = loss_sum / rows as f64;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("epoch {epoch}: batch loss {loss}, gradient norm {}", grads.norm()),
                });
            }
            adam.step(&mut model.params, &grads)?;
            report.step_losses.push(loss);
            epoch_loss += loss_sum;
            epoch_rows += rows;
            step += 1;
        }
        if epoch_rows > 0 {
            let mean = epoch_loss / epoch_rows as f64;
            tracing::info!(epoch, loss = mean, "reward model epoch");
            report.epoch_losses.push(mean);
        }
    }
    Ok(report)
}
