//! Group-relative policy optimisation for categorical policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkernel::{self, Grads, ParamStore, Sgd, Tape, Tensor, Var};

/// A policy whose output distribution is a categorical over a fixed action set.
pub trait CategoricalPolicy {
    type Context;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn num_actions(&self) -> usize;

    /// `1 x num_actions` log-probabilities, built from `vars` (indexed by
    /// `ParamId`) so any parameter set of the same layout can be evaluated.
    fn log_probs_taped(&self, tape: &mut Tape, vars: &[Var], ctx: &Self::Context) -> ndkernel::Result<Var>;
}

pub fn log_probs_under<P: CategoricalPolicy>(policy: &P, params: &ParamStore, ctx: &P::Context) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind_all(&mut tape, false);
    let lp = policy.log_probs_taped(&mut tape, &vars, ctx)?;
    Ok(tape.value(lp).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// `sum_k p(k) (log p(k) - log p_ref(k))` over the whole action set.
    Exact,
    /// Per-sample `r - log r - 1` with `r = p_ref / p`, averaged over the group.
    Estimator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub alpha: f64,
    pub std_floor: f64,
    pub kl: KlMode,
    /// Log-ratio magnitude beyond which `exp` is clamped.
    pub max_log_ratio: f64,
    /// Take a fresh reference snapshot at the start of every phase.
    pub resnapshot_reference: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon: 0.2,
            beta: 0.04,
            alpha: 0.05,
            std_floor: 1e-8,
            kl: KlMode::Exact,
            max_log_ratio: 50.0,
            resnapshot_reference: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 1 {
            return bad("group_size must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        Ok(())
    }
}

/// Frozen parameter snapshot used by the KL penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePolicy {
    params: ParamStore,
}

impl ReferencePolicy {
    pub fn snapshot<P: CategoricalPolicy>(policy: &P) -> Self {
        Self { params: policy.params().clone() }
    }

    pub fn from_params(params: ParamStore) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub actions: Vec<usize>,
    pub outputs: Vec<String>,
    pub rewards: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Population standard deviation.
pub fn population_std(rewards: &[f64]) -> f64 {
    let g = rewards.len() as f64;
    let s: f64 = rewards.iter().sum();
    let sq: f64 = rewards.iter().map(|&r| (g * r - s).powi(2)).sum();
    sq.sqrt() / (g * g.sqrt())
}

/// `(r_n - mean) / std` with the population std, all zeros below `std_floor`.
///
/// Computed as `(G r_n - sum r) / sqrt(sum_m (G r_m - sum r)^2 / G)`, which is
/// algebraically the same and involves one rounding fewer per term, so a
/// constant shift or a power-of-two scale of exactly representable rewards
/// reproduces the advantages bit for bit.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    if rewards.is_empty() {
        return vec![];
    }
    let s: f64 = rewards.iter().sum();
    let num: Vec<f64> = rewards.iter().map(|&r| g * r - s).collect();
    let sq: f64 = num.iter().map(|x| x * x).sum();
    if !(sq.sqrt() / (g * g.sqrt()) >= std_floor) {
        return vec![0.0; rewards.len()];
    }
    let denom = (sq / g).sqrt();
    num.iter().map(|x| x / denom).collect()
}

pub fn kl_categorical(logp: &[f64], ref_logp: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (&a, &b) in logp.iter().zip(ref_logp) {
        let p = a.exp();
        if p > 0.0 && b == f64::NEG_INFINITY {
            return Err(Error::Config("reference assigns zero probability to a supported action".into()));
        }
        if p > 0.0 {
            kl += p * (a - b);
        }
    }
    Ok(kl)
}

/// `r - ln r - 1` with `r = exp(ref_lp - lp)`; never negative.
pub fn kl_estimator(lp: f64, ref_lp: f64) -> f64 {
    let d = ref_lp - lp;
    d.exp_m1() - d
}

pub fn sample_categorical<R: Rng + ?Sized>(lp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return k;
        }
    }
    lp.iter().rposition(|l| l.exp() > 0.0).unwrap_or(lp.len() - 1)
}

#[derive(Clone, Copy, Debug)]
pub struct Objective {
    /// Scalar `J`.
    pub value: Var,
    pub kl: f64,
    pub clamped: usize,
}

/// Builds `J = mean_n(rho_n) - beta * KL` on the tape.
pub fn surrogate_objective<P: CategoricalPolicy>(
    tape: &mut Tape,
    policy: &P,
    vars: &[Var],
    ctx: &P::Context,
    group: &GroupSample,
    reference: &ReferencePolicy,
    cfg: &GrpoConfig,
) -> Result<Objective> {
    let g = group.actions.len();
    let v = policy.num_actions();
    let lp = policy.log_probs_taped(tape, vars, ctx)?;
    let col = tape.reshape(lp, vec![v, 1])?;
    let new = tape.gather_rows(col, std::sync::Arc::new(group.actions.clone()))?;
    let old = tape.constant(Tensor::new(vec![g, 1], group.old_logprobs.clone())?);
    let diff = tape.sub(new, old)?;
    let clamped = tape.value(diff).data().iter().filter(|d| d.abs() > cfg.max_log_ratio).count();
    if clamped > 0 {
        tracing::warn!(clamped, "log-ratio clamped");
    }
    let diff = tape.clamp(diff, -cfg.max_log_ratio, cfg.max_log_ratio)?;
    let delta = tape.exp(diff)?;
    let adv = tape.constant(Tensor::new(vec![g, 1], group.advantages.clone())?);
    let unclipped = tape.mul(delta, adv)?;
    let c = tape.clamp(delta, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon)?;
    let clipped = tape.mul(c, adv)?;
    let rho = tape.minimum(unclipped, clipped)?;
    let rho = tape.sum(rho)?;
    let mut j = tape.scale(rho, 1.0 / g as f64)?;
    let kl_var = match cfg.kl {
        KlMode::Exact => {
            let ref_lp = log_probs_under(policy, reference.params(), ctx)?;
            let r = tape.constant(Tensor::row(ref_lp));
            let p = tape.exp(lp)?;
            let d = tape.sub(lp, r)?;
            let m = tape.mul(p, d)?;
            tape.sum(m)?
        }
        KlMode::Estimator => {
            let r = tape.constant(Tensor::new(vec![g, 1], group.ref_logprobs.clone())?);
            let d = tape.sub(r, new)?;
            let k = tape.expm1_minus_id(d)?;
            let k = tape.sum(k)?;
            tape.scale(k, 1.0 / g as f64)?
        }
    };
    let kl = tape.value(kl_var).item();
    if cfg.beta != 0.0 {
        let pen = tape.scale(kl_var, -cfg.beta)?;
        j = tape.add(j, pen)?;
    }
    Ok(Objective { value: j, kl, clamped })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub kl: f64,
    pub objective: f64,
    pub clamped: usize,
    /// True when every advantage was zero and no update was made.
    pub skipped: bool,
}

impl StepStats {
    pub const TSV_HEADER: &'static str = "step\tmean_reward\tmean_abs_advantage\tkl\tobjective";

    pub fn tsv_row(&self, step: usize) -> String {
        format!("{step}\t{}\t{}\t{}\t{}", self.mean_reward, self.mean_abs_advantage, self.kl, self.objective)
    }
}

/// Gradient of `J` with respect to the policy parameters.
pub fn objective_gradient<P: CategoricalPolicy>(
    policy: &P,
    ctx: &P::Context,
    group: &GroupSample,
    reference: &ReferencePolicy,
    cfg: &GrpoConfig,
) -> Result<(Grads, f64, f64, usize)> {
    let mut tape = Tape::new();
    let vars = policy.params().bind_all(&mut tape, true);
    let obj = surrogate_objective(&mut tape, policy, &vars, ctx, group, reference, cfg)?;
    tape.backward(obj.value)?;
    let mut g = Grads::zeros_like(policy.params());
    g.add_tape(&tape);
    Ok((g, tape.value(obj.value).item(), obj.kl, obj.clamped))
}

/// One update: descent on `-J` with step `alpha`, i.e. ascent on `J`.
///
/// A group whose advantages are all zero carries no preference signal; it is
/// skipped so the KL term alone never moves the policy.
pub fn step<P: CategoricalPolicy>(
    policy: &mut P,
    ctx: &P::Context,
    group: &GroupSample,
    reference: &ReferencePolicy,
    cfg: &GrpoConfig,
) -> Result<StepStats> {
    let n = group.rewards.len().max(1) as f64;
    let mut stats = StepStats {
        mean_reward: group.rewards.iter().sum::<f64>() / n,
        mean_abs_advantage: group.advantages.iter().map(|a| a.abs()).sum::<f64>() / n,
        ..Default::default()
    };
    if group.advantages.iter().all(|&a| a == 0.0) {
        stats.skipped = true;
        stats.kl = match cfg.kl {
            KlMode::Exact => kl_categorical(
                &log_probs_under(policy, policy.params(), ctx)?,
                &log_probs_under(policy, reference.params(), ctx)?,
            )?,
            KlMode::Estimator => {
                group.old_logprobs.iter().zip(&group.ref_logprobs).map(|(&a, &b)| kl_estimator(a, b)).sum::<f64>() / n
            }
        };
        return Ok(stats);
    }
    let (mut grads, objective, kl, clamped) = objective_gradient(policy, ctx, group, reference, cfg)?;
    if !grads.is_finite() {
        return Err(Error::Diverged { step: 0, detail: "non-finite policy gradient".into() });
    }
    grads.scale(-1.0);
    Sgd { lr: cfg.alpha }.step(policy.params_mut(), &grads)?;
    stats.objective = objective;
    stats.kl = kl;
    stats.clamped = clamped;
    Ok(stats)
}

/// Samples a group from the current policy, scores it, and fills in
/// log-probabilities and advantages.
pub fn sample_group<P, R, F>(
    policy: &P,
    ctx: &P::Context,
    reference: &ReferencePolicy,
    cfg: &GrpoConfig,
    rng: &mut R,
    mut score: F,
) -> Result<GroupSample>
where
    P: CategoricalPolicy,
    R: Rng + ?Sized,
    F: FnMut(&[usize]) -> Result<Vec<(String, f64)>>,
{
    let lp = log_probs_under(policy, policy.params(), ctx)?;
    let ref_lp = log_probs_under(policy, reference.params(), ctx)?;
    let actions: Vec<usize> = (0..cfg.group_size).map(|_| sample_categorical(&lp, rng)).collect();
    let scored = score(&actions)?;
    let (outputs, rewards): (Vec<String>, Vec<f64>) = scored.into_iter().unzip();
    let advantages = compute_advantages(&rewards, cfg.std_floor);
    Ok(GroupSample {
        old_logprobs: actions.iter().map(|&a| lp[a]).collect(),
        ref_logprobs: actions.iter().map(|&a| ref_lp[a]).collect(),
        actions,
        outputs,
        rewards,
        advantages,
    })
}
