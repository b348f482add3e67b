//! Bootstrap of patterns and reasons, then a single chronological sweep that
//! alternates one policy update with one pattern/reason update per interaction.

mod store;

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use store::{PatternRecord, Phase, ReasonEntry, StoreLog, StoreRecord, Stores};

use crate::datasets::{ItemDescription, SplitDataset, TrainEvent};
use crate::error::{Error, IoContext, Result};
use crate::grpo::{self, GroupSample, GrpoConfig, ReferencePolicy, StepStats};
use crate::ndkernel::{self, Grads, Sgd};
use crate::reward_model::{encode_all, RewardModel, TextEncoder, TextFeatures};
use crate::textgen::{parse_structured_output, Features, GeneratorBackend, PromptContext, PromptKind, SurrogatePolicy};

const ATTEMPTS: usize = 3;
const MAX_SKIP_FRACTION: f64 = 0.05;

/// Generates and parses one answer, retrying malformed or failed generations.
/// `Ok(None)` means every attempt failed.
fn generate_answer(
    gen: &dyn GeneratorBackend,
    kind: PromptKind,
    ctx: &PromptContext<'_>,
    rng: &mut dyn RngCore,
) -> Result<Option<String>> {
    for attempt in 0..ATTEMPTS {
        let out = gen.generate(kind, ctx, rng).and_then(|raw| parse_structured_output(&raw));
        match out {
            Ok(o) => return Ok(Some(o.answer)),
            Err(e @ (Error::MalformedOutput(_) | Error::Transport(_))) => {
                tracing::debug!(%kind, attempt, error = %e, "generation failed");
            }
            Err(e) => return Err(e),
        }
    }
    tracing::warn!(%kind, "no valid generation after {ATTEMPTS} attempts; skipping");
    Ok(None)
}

fn descriptions<'a>(split: &'a SplitDataset, items: &[usize]) -> Vec<&'a ItemDescription> {
    items.iter().map(|&i| &split.catalog[i]).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub patterns: usize,
    pub reasons: usize,
    pub skipped_patterns: usize,
    pub skipped_reasons: usize,
}

/// One pattern per training user from its whole training sequence, then one
/// reason per training interaction in chronological order.
pub fn bootstrap_features(
    split: &SplitDataset,
    gen: &dyn GeneratorBackend,
    seed: u64,
    mut log: Option<&mut StoreLog>,
) -> Result<(Stores, BootstrapReport)> {
    let mut stores = Stores::new(split.n_users(), split.n_items());
    let mut report = BootstrapReport::default();
    let users: Vec<usize> = split.train.iter().filter(|s| !s.items.is_empty()).map(|s| s.user).collect();
    for &u in &users {
        let seq = &split.train[u];
        let ctx = PromptContext { history: Some(descriptions(split, &seq.items)), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 1, u as u64));
        match generate_answer(gen, PromptKind::Pattern, &ctx, &mut rng)? {
            Some(text) => {
                let ts = *seq.timestamps.last().expect("non-empty");
                let rec = stores.set_pattern(u, text, ts)?;
                if let Some(l) = log.as_deref_mut() {
                    l.write(&rec)?;
                }
                report.patterns += 1;
            }
            None => report.skipped_patterns += 1,
        }
    }
    check_skips("pattern", report.skipped_patterns, users.len())?;
    let events = split.chronological_train();
    for (k, ev) in events.iter().enumerate() {
        let seq = &split.train[ev.user];
        let ctx = PromptContext {
            history: Some(descriptions(split, &seq.items)),
            pattern: stores.pattern(ev.user),
            item: Some(&split.catalog[ev.item]),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 2, k as u64));
        match generate_answer(gen, PromptKind::Reason, &ctx, &mut rng)? {
            Some(text) => {
                let rec = stores.append_reason(ev.item, ev.user, text, ev.timestamp, Phase::Bootstrap)?;
                if let Some(l) = log.as_deref_mut() {
                    l.write(&rec)?;
                }
                report.reasons += 1;
            }
            None => report.skipped_reasons += 1,
        }
    }
    check_skips("reason", report.skipped_reasons, events.len())?;
    if let Some(l) = log {
        l.flush()?;
    }
    Ok((stores, report))
}

fn check_skips(what: &str, skipped: usize, total: usize) -> Result<()> {
    if total > 0 && skipped as f64 > MAX_SKIP_FRACTION * total as f64 {
        return Err(Error::Store(format!("{skipped} of {total} {what} generations failed")));
    }
    Ok(())
}

/// Embeds every pattern and reason; users without a pattern get the zero query.
pub fn text_features(stores: &Stores, encoder: &dyn TextEncoder) -> Result<TextFeatures> {
    let texts: Vec<&str> = stores
        .patterns
        .iter()
        .map(|p| p.as_ref().map_or("", |p| p.text.as_str()))
        .chain(stores.reasons.iter().flatten().map(|e| e.text.as_str()))
        .collect();
    let mut emb = encode_all(encoder, &texts)?.into_iter();
    let patterns: Vec<Vec<f64>> = emb.by_ref().take(stores.n_users()).collect();
    let reasons = stores.reasons.iter().map(|l| emb.by_ref().take(l.len()).collect()).collect();
    let missing_patterns = stores.patterns.iter().filter(|p| p.is_none()).count();
    Ok(TextFeatures { patterns, reasons, missing_patterns })
}

/// `ŷ` for `(user, item)` with `candidate` appended to the item's reasons.
#[allow(clippy::too_many_arguments)]
pub fn reward_bridge(
    model: &RewardModel,
    encoder: &dyn TextEncoder,
    pattern: &str,
    reasons: &[String],
    candidate: &str,
    history: &[usize],
    item: usize,
) -> Result<f64> {
    let p = encoder.encode(pattern)?;
    let q: Vec<Vec<f64>> = reasons.iter().map(|r| encoder.encode(r)).collect::<Result<_>>()?;
    let c = encoder.encode(candidate)?;
    Ok(model.score_candidates(history, item, &p, &q, &[Some(c)])?[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub grpo: GrpoConfig,
    pub seed: u64,
    /// Candidates that fail to parse score `ŷ(Q_i) - malformed_penalty`.
    pub malformed_penalty: f64,
    /// Consecutive interactions sharing one policy update.
    pub micro_batch: usize,
    /// Interactions between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Stop after this many interactions (the sweep can be resumed).
    pub max_events: Option<usize>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            seed: 17,
            malformed_penalty: 1.0,
            micro_batch: 1,
            checkpoint_every: 0,
            max_events: None,
        }
    }
}

/// Per-interaction record of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub event: usize,
    pub user: usize,
    pub item: usize,
    pub stats: Option<StepStats>,
    pub updated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionState {
    pub policy: SurrogatePolicy,
    pub reference: ReferencePolicy,
    pub stores: Stores,
    /// Index of the next event in the chronological schedule.
    pub cursor: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    cursor: usize,
    log_bytes: Option<u64>,
    steps: Vec<StepRecord>,
}

pub struct Corrector<'a> {
    split: &'a SplitDataset,
    model: &'a RewardModel,
    encoder: &'a dyn TextEncoder,
    cfg: CorrectionConfig,
    schedule: Vec<TrainEvent>,
    features: TextFeatures,
    state: CorrectionState,
    log: Option<StoreLog>,
    steps: Vec<StepRecord>,
    pending: Vec<(GroupSample, Features)>,
}

impl<'a> Corrector<'a> {
    /// Starts a sweep; the reference policy is snapshotted here.
    pub fn new(
        split: &'a SplitDataset,
        model: &'a RewardModel,
        encoder: &'a dyn TextEncoder,
        cfg: CorrectionConfig,
        policy: SurrogatePolicy,
        stores: Stores,
    ) -> Result<Self> {
        cfg.grpo.validate()?;
        if cfg.micro_batch == 0 {
            return Err(Error::Config("micro_batch must be at least 1".into()));
        }
        if stores.n_users() != split.n_users() || stores.n_items() != split.n_items() {
            return Err(Error::Store("stores do not match the split".into()));
        }
        let features = text_features(&stores, encoder)?;
        let reference = ReferencePolicy::snapshot(&policy);
        Ok(Self {
            split,
            model,
            encoder,
            schedule: split.chronological_train(),
            features,
            state: CorrectionState { policy, reference, stores, cursor: 0 },
            log: None,
            steps: Vec::new(),
            pending: Vec::new(),
            cfg,
        })
    }

    /// Mirrors every store mutation into `log`.
    pub fn with_log(mut self, log: StoreLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn state(&self) -> &CorrectionState {
        &self.state
    }

    pub fn into_state(self) -> CorrectionState {
        self.state
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn schedule(&self) -> &[TrainEvent] {
        &self.schedule
    }

    pub fn features(&self) -> &TextFeatures {
        &self.features
    }

    fn prefix(&self, ev: &TrainEvent) -> &'a [usize] {
        &self.split.train[ev.user].items[..ev.position]
    }

    fn reason_context(&self, ev: &TrainEvent) -> PromptContext<'a> {
        let split: &'a SplitDataset = self.split;
        PromptContext {
            history: Some(descriptions(split, &split.train[ev.user].items[..ev.position])),
            item: Some(&split.catalog[ev.item]),
            ..Default::default()
        }
    }

    /// Samples `G` candidate reasons and scores each with the frozen model.
    /// Returns `None` when the user has no earlier interaction to encode.
    pub fn sample_scored_group(&self, ev: &TrainEvent, rng: &mut dyn RngCore) -> Result<Option<(GroupSample, Features)>> {
        let history = self.prefix(ev);
        if history.is_empty() {
            return Ok(None);
        }
        let mut ctx = self.reason_context(ev);
        ctx.pattern = self.state.stores.pattern(ev.user);
        let policy = &self.state.policy;
        let f = policy.features(&ctx);
        let pattern = &self.features.patterns[ev.user];
        let reasons = &self.features.reasons[ev.item];
        let group = grpo::sample_group(policy, &f, &self.state.reference, &self.cfg.grpo, rng, |actions| {
            let raws: Vec<String> =
                actions.iter().map(|&a| policy.instantiate(a, PromptKind::Reason, &ctx)).collect::<Result<_>>()?;
            let extras: Vec<Option<Vec<f64>>> = raws
                .iter()
                .map(|raw| match parse_structured_output(raw) {
                    Ok(o) => self.encoder.encode(&o.answer).map(Some),
                    Err(_) => Ok(None),
                })
                .collect::<Result<_>>()?;
            let mut with_base = extras.clone();
            with_base.push(None);
            let scores = self.model.score_candidates(history, ev.item, pattern, reasons, &with_base)?;
            let base = scores[extras.len()];
            Ok(raws
                .into_iter()
                .zip(extras.iter().zip(&scores))
                .map(|(raw, (e, &s))| (raw, if e.is_some() { s } else { base - self.cfg.malformed_penalty }))
                .collect())
        })?;
        Ok(Some((group, f)))
    }

    /// One GRPO step on a freshly sampled group; nothing is written to the stores.
    pub fn correction_step(&mut self, ev: &TrainEvent, rng: &mut dyn RngCore) -> Result<Option<StepStats>> {
        let Some((group, f)) = self.sample_scored_group(ev, rng)? else {
            return Ok(None);
        };
        let stats = grpo::step(&mut self.state.policy, &f, &group, &self.state.reference, &self.cfg.grpo)?;
        Ok(Some(stats))
    }

    /// Asks the policy for `(p_u', q'_ui)` and records both.
    pub fn update_pattern_and_reasons(&mut self, ev: &TrainEvent, rng: &mut dyn RngCore) -> Result<bool> {
        let split: &'a SplitDataset = self.split;
        let Some(current) = self.state.stores.pattern(ev.user).map(str::to_string) else {
            tracing::warn!(user = ev.user, "no pattern to update");
            return Ok(false);
        };
        let ctx = PromptContext { pattern: Some(&current), item: Some(&split.catalog[ev.item]), ..Default::default() };
        let answer = generate_answer(&self.state.policy, PromptKind::Update, &ctx, rng)?;
        let Some((pattern, reason)) = answer.as_deref().and_then(split_update) else {
            tracing::warn!(user = ev.user, item = ev.item, "update output unusable; pattern kept, reason skipped");
            return Ok(false);
        };
        let recs = [
            self.state.stores.set_pattern(ev.user, pattern.to_string(), ev.timestamp)?,
            self.state.stores.append_reason(ev.item, ev.user, reason.to_string(), ev.timestamp, Phase::Corrected)?,
        ];
        self.features.patterns[ev.user] = self.encoder.encode(pattern)?;
        self.features.reasons[ev.item].push(self.encoder.encode(reason)?);
        if let Some(log) = self.log.as_mut() {
            for r in &recs {
                log.write(r)?;
            }
        }
        Ok(true)
    }

    fn flush_pending(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut grads = Grads::zeros_like(grpo::CategoricalPolicy::params(&self.state.policy));
        let mut any = false;
        for (group, f) in &self.pending {
            if group.advantages.iter().all(|&a| a == 0.0) {
                continue;
            }
            let (g, ..) = grpo::objective_gradient(&self.state.policy, f, group, &self.state.reference, &self.cfg.grpo)?;
            grads.merge(&g);
            any = true;
        }
        let n = self.pending.len();
        self.pending.clear();
        if !any {
            return Ok(());
        }
        grads.scale(-1.0 / n as f64);
        if !grads.is_finite() {
            return Err(Error::Diverged { step: self.state.cursor, detail: "non-finite policy gradient".into() });
        }
        Sgd { lr: self.cfg.grpo.alpha }.step(grpo::CategoricalPolicy::params_mut(&mut self.state.policy), &grads)?;
        Ok(())
    }

    fn process(&mut self, k: usize) -> Result<StepRecord> {
        let ev = self.schedule[k];
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(self.cfg.seed, 3, k as u64));
        let stats = if self.cfg.micro_batch == 1 {
            self.correction_step(&ev, &mut rng)?
        } else {
            let sampled = self.sample_scored_group(&ev, &mut rng)?;
            sampled.map(|(group, f)| {
                let n = group.rewards.len().max(1) as f64;
                let stats = StepStats {
                    mean_reward: group.rewards.iter().sum::<f64>() / n,
                    mean_abs_advantage: group.advantages.iter().map(|a| a.abs()).sum::<f64>() / n,
                    skipped: group.advantages.iter().all(|&a| a == 0.0),
                    ..Default::default()
                };
                self.pending.push((group, f));
                stats
            })
        };
        let updated = self.update_pattern_and_reasons(&ev, &mut rng)?;
        if self.cfg.micro_batch > 1 && (self.pending.len() >= self.cfg.micro_batch || k + 1 == self.schedule.len()) {
            self.flush_pending()?;
        }
        Ok(StepRecord { event: k, user: ev.user, item: ev.item, stats, updated })
    }

    /// Runs from the cursor to the end of the schedule (or `max_events`),
    /// checkpointing into `ckpt_dir` when configured.
    pub fn run(&mut self, ckpt_dir: Option<&Path>) -> Result<()> {
        let end = match self.cfg.max_events {
            Some(m) => (self.state.cursor + m).min(self.schedule.len()),
            None => self.schedule.len(),
        };
        while self.state.cursor < end {
            let k = self.state.cursor;
            let rec = self.process(k)?;
            self.steps.push(rec);
            self.state.cursor += 1;
            let boundary = self.cfg.micro_batch <= 1 || self.pending.is_empty();
            if let (Some(dir), true) = (ckpt_dir, boundary) {
                if self.cfg.checkpoint_every > 0 && self.state.cursor % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if self.state.cursor == self.schedule.len() {
            self.flush_pending()?;
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(())
    }

    /// Writes `policy/`, `reference.ckpt`, `stores.snapshot.json` and `state.json`.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        if !self.pending.is_empty() {
            return Err(Error::Store("cannot checkpoint inside a micro-batch".into()));
        }
        std::fs::create_dir_all(dir).at(dir)?;
        self.state.policy.save(&dir.join("policy"))?;
        ndkernel::save_checkpoint(&dir.join("reference.ckpt"), self.state.reference.params())?;
        self.state.stores.save_snapshot(&dir.join("stores.snapshot.json"))?;
        let log_bytes = match self.log.as_mut() {
            Some(l) => {
                l.flush()?;
                Some(std::fs::metadata(l.path()).at(l.path())?.len())
            }
            None => None,
        };
        let meta = CheckpointMeta { cursor: self.state.cursor, log_bytes, steps: self.steps.clone() };
        let p = dir.join("state.json");
        std::fs::write(&p, serde_json::to_string(&meta)?).at(&p)?;
        tracing::info!(cursor = self.state.cursor, dir = %dir.display(), "correction checkpoint");
        Ok(())
    }

    /// Continues a sweep from a checkpoint. A store log at `log_path` is cut
    /// back to its length at checkpoint time and appended to.
    pub fn resume(
        split: &'a SplitDataset,
        model: &'a RewardModel,
        encoder: &'a dyn TextEncoder,
        cfg: CorrectionConfig,
        dir: &Path,
        log_path: Option<&Path>,
    ) -> Result<Self> {
        let p = dir.join("state.json");
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?;
        let policy = SurrogatePolicy::load(&dir.join("policy"))?;
        let reference = ReferencePolicy::from_params(ndkernel::load_checkpoint(&dir.join("reference.ckpt"))?);
        let stores = Stores::load_snapshot(&dir.join("stores.snapshot.json"))?;
        let mut c = Self::new(split, model, encoder, cfg, policy, stores)?;
        c.state.reference = reference;
        c.state.cursor = meta.cursor;
        c.steps = meta.steps;
        if let Some(lp) = log_path {
            if let Some(n) = meta.log_bytes {
                let f = std::fs::OpenOptions::new().write(true).open(lp).at(lp)?;
                f.set_len(n).at(lp)?;
            }
            c.log = Some(StoreLog::append_to(lp)?);
        }
        Ok(c)
    }

    /// Tab-separated per-interaction log.
    pub fn write_step_log(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step\tuser\titem\tmean_reward\tmean_abs_advantage\tkl\tobjective\tpolicy_updated\tstores_updated")?;
        for r in &self.steps {
            match &r.stats {
                Some(s) => writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.event, r.user, r.item, s.mean_reward, s.mean_abs_advantage, s.kl, s.objective, !s.skipped, r.updated
                )?,
                None => writeln!(out, "{}\t{}\t{}\t\t\t\t\tfalse\t{}", r.event, r.user, r.item, r.updated)?,
            }
        }
        Ok(())
    }
}

/// Splits an update answer into its first line (pattern) and the rest (reason).
fn split_update(answer: &str) -> Option<(&str, &str)> {
    let (p, r) = answer.split_once('\n')?;
    let (p, r) = (p.trim(), r.trim());
    (!p.is_empty() && !r.is_empty()).then_some((p, r))
}
