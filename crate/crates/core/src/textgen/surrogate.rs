//! Trainable categorical stand-in for the language model.
//!
//! Each template either mentions one catalog attribute or is an unstructured
//! completion without tags. Template `k` has logit `theta_k + phi_k . w`, where
//! `phi_k` holds three context features:
//!
//! 0. how often the history carries attribute `k`, relative to the most common one,
//! 1. whether the current pattern names `k` (1 for the core interest, 0.5 otherwise),
//! 2. whether the target item carries `k`.
//!
//! With `w = 0` the logits are exactly `theta`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::parse::format_output;
use super::prompts::{PromptContext, PromptKind};
use crate::datasets::ItemDescription;
use crate::error::{Error, Result};
use crate::grpo::CategoricalPolicy;
use crate::ndkernel::{ParamId, ParamStore, Tape, Tensor, Var};

pub const N_FEATURES: usize = 3;
pub const LOGITS: &str = "policy.logits";
pub const WEIGHTS: &str = "policy.w";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    Mention(String),
    Unstructured,
}

impl Template {
    pub fn tag(&self) -> Option<&str> {
        match self {
            Template::Mention(t) => Some(t),
            Template::Unstructured => None,
        }
    }
}

/// Sorted, deduplicated attribute values of `kind` (all kinds when `None`).
pub fn attribute_vocab(catalog: &[ItemDescription], kind: Option<&str>) -> Vec<String> {
    let mut v: Vec<String> = catalog
        .iter()
        .flat_map(|d| d.attributes.iter())
        .filter(|a| kind.map_or(true, |k| a.kind == k))
        .map(|a| a.value.clone())
        .collect();
    v.sort();
    v.dedup();
    v
}

/// Attribute counts over a history, most frequent first, ties by name.
pub fn ranked_tags(history: &[&ItemDescription], vocab: &[String]) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in history {
        for a in &d.attributes {
            if vocab.binary_search(&a.value).is_ok() {
                *counts.entry(a.value.as_str()).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatternTags {
    pub core: Option<String>,
    pub secondary: Vec<String>,
}

pub fn pattern_text(tags: &PatternTags) -> String {
    match &tags.core {
        None => "Core interest: none.".into(),
        Some(c) if tags.secondary.is_empty() => format!("Core interest: {c}."),
        Some(c) => format!("Core interest: {c}. Also enjoys: {}.", tags.secondary.join(", ")),
    }
}

/// Reads back a pattern. Free text that lacks the structured form falls back
/// to listing every vocabulary word it contains as a secondary interest.
pub fn parse_pattern(text: &str, vocab: &[String]) -> PatternTags {
    let field = |key: &str| -> Option<&str> {
        let start = text.find(key)? + key.len();
        let rest = &text[start..];
        Some(rest[..rest.find('.').unwrap_or(rest.len())].trim())
    };
    if let Some(core) = field("Core interest:") {
        let core = Some(core.to_string()).filter(|c| vocab.binary_search(c).is_ok());
        let secondary = field("Also enjoys:")
            .map(|s| {
                s.split(',').map(|x| x.trim().to_string()).filter(|x| vocab.binary_search(x).is_ok()).collect()
            })
            .unwrap_or_default();
        return PatternTags { core, secondary };
    }
    let lower = text.to_lowercase();
    PatternTags { core: None, secondary: vocab.iter().filter(|v| lower.contains(&v.to_lowercase())).cloned().collect() }
}

pub fn pattern_from_history(history: &[&ItemDescription], vocab: &[String]) -> PatternTags {
    let ranked = ranked_tags(history, vocab);
    let mut it = ranked.into_iter().map(|(t, _)| t);
    PatternTags { core: it.next(), secondary: it.take(2).collect() }
}

/// Folds one new attribute into a pattern: the core interest is kept, a known
/// secondary interest moves to the front, a new one is inserted at the front
/// and the list is capped at two.
pub fn update_pattern(tags: &PatternTags, tag: &str) -> PatternTags {
    let mut out = tags.clone();
    if out.core.is_none() {
        out.core = Some(tag.to_string());
        return out;
    }
    if out.core.as_deref() == Some(tag) {
        return out;
    }
    out.secondary.retain(|t| t != tag);
    out.secondary.insert(0, tag.to_string());
    out.secondary.truncate(2);
    out
}

pub fn reason_sentence(tag: &str) -> String {
    format!("Recommended for its {tag} elements, matching the user's taste.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub action: usize,
    pub raw: String,
    pub logprob: f64,
}

/// Per-context feature matrix (`V x 3`).
#[derive(Clone, Debug, PartialEq)]
pub struct Features(pub Arc<Tensor>);

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogatePolicy {
    vocab: Vec<Template>,
    tags: Vec<String>,
    params: ParamStore,
    logits: ParamId,
    weights: ParamId,
    temperature: f64,
}

impl SurrogatePolicy {
    /// One template per attribute value plus the unstructured template.
    pub fn from_tags(tags: Vec<String>, temperature: f64) -> Result<Self> {
        let mut vocab: Vec<Template> = tags.iter().cloned().map(Template::Mention).collect();
        vocab.push(Template::Unstructured);
        Self::new(vocab, temperature)
    }

    pub fn new(vocab: Vec<Template>, temperature: f64) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Config("surrogate policy needs at least one template".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let mut tags: Vec<String> = vocab.iter().filter_map(|t| t.tag().map(str::to_string)).collect();
        tags.sort();
        tags.dedup();
        let mut params = ParamStore::new();
        let logits = params.add(LOGITS, Tensor::zeros(vec![1, vocab.len()]))?;
        let weights = params.add(WEIGHTS, Tensor::zeros(vec![N_FEATURES, 1]))?;
        Ok(Self { vocab, tags, params, logits, weights, temperature })
    }

    pub fn with_logits(mut self, logits: Vec<f64>) -> Result<Self> {
        let id = self.logits;
        self.params.set(id, Tensor::row(logits))?;
        Ok(self)
    }

    pub fn with_weights(mut self, w: [f64; N_FEATURES]) -> Result<Self> {
        let id = self.weights;
        self.params.set(id, Tensor::new(vec![N_FEATURES, 1], w.to_vec())?)?;
        Ok(self)
    }

    /// Restores parameters from a store with the same names and shapes.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        for (name, id) in [(LOGITS, self.logits), (WEIGHTS, self.weights)] {
            let src = store.id(name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            self.params.set(id, store.get(src).clone())?;
        }
        Ok(())
    }

    /// Writes `policy.json` (templates, temperature) and `policy.ckpt` into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        use crate::error::IoContext;
        std::fs::create_dir_all(dir).at(dir)?;
        let meta = serde_json::json!({ "vocab": self.vocab, "temperature": self.temperature });
        let p = dir.join("policy.json");
        std::fs::write(&p, serde_json::to_string_pretty(&meta)?).at(&p)?;
        crate::ndkernel::save_checkpoint(&dir.join("policy.ckpt"), &self.params)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        use crate::error::IoContext;
        let p = dir.join("policy.json");
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?;
        let vocab: Vec<Template> = serde_json::from_value(meta["vocab"].clone())?;
        let t = meta["temperature"].as_f64().ok_or_else(|| Error::Config(format!("{}: missing temperature", p.display())))?;
        let mut policy = Self::new(vocab, t)?;
        policy.load_params(&crate::ndkernel::load_checkpoint(&dir.join("policy.ckpt"))?)?;
        Ok(policy)
    }

    pub fn vocab(&self) -> &[Template] {
        &self.vocab
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) {
        self.temperature = t;
    }

    pub fn logits_param(&self) -> &[f64] {
        self.params.get(self.logits).data()
    }

    pub fn weights_param(&self) -> &[f64] {
        self.params.get(self.weights).data()
    }

    pub fn action_of(&self, tag: &str) -> Option<usize> {
        self.vocab.iter().position(|t| t.tag() == Some(tag))
    }

    pub fn features(&self, ctx: &PromptContext<'_>) -> Features {
        let v = self.vocab.len();
        let mut phi = vec![0.0; v * N_FEATURES];
        if let Some(h) = &ctx.history {
            let ranked = ranked_tags(h, &self.tags);
            if let Some(&(_, top)) = ranked.first() {
                for (tag, c) in &ranked {
                    if let Some(k) = self.action_of(tag) {
                        phi[k * N_FEATURES] = *c as f64 / top as f64;
                    }
                }
            }
        }
        if let Some(p) = ctx.pattern {
            let pt = parse_pattern(p, &self.tags);
            for t in &pt.secondary {
                if let Some(k) = self.action_of(t) {
                    phi[k * N_FEATURES + 1] = 0.5;
                }
            }
            if let Some(k) = pt.core.as_deref().and_then(|c| self.action_of(c)) {
                phi[k * N_FEATURES + 1] = 1.0;
            }
        }
        if let Some(item) = ctx.item {
            for a in &item.attributes {
                if let Some(k) = self.action_of(&a.value) {
                    phi[k * N_FEATURES + 2] = 1.0;
                }
            }
        }
        Features(Arc::new(Tensor::new(vec![v, N_FEATURES], phi).expect("feature shape")))
    }

    pub fn log_probs(&self, f: &Features) -> Vec<f64> {
        self.log_probs_with(&self.params, f)
    }

    /// Log-probabilities under another parameter set of the same layout.
    pub fn log_probs_with(&self, params: &ParamStore, f: &Features) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = params.bind_all(&mut tape, false);
        let lp = self.log_probs_taped(&mut tape, &vars, f).expect("policy shapes are fixed at construction");
        tape.value(lp).data().to_vec()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, lp: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return k;
            }
        }
        lp.iter().enumerate().rev().find(|(_, l)| l.exp() > 0.0).map_or(lp.len() - 1, |(k, _)| k)
    }

    pub fn greedy_action(&self, lp: &[f64]) -> usize {
        let mut best = 0;
        for (k, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = k;
            }
        }
        best
    }

    /// Draws `g` i.i.d. templates and renders them against the context.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        kind: PromptKind,
        ctx: &PromptContext<'_>,
        g: usize,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        let f = self.features(ctx);
        let lp = self.log_probs(&f);
        (0..g)
            .map(|_| {
                let a = self.sample_action(&lp, rng);
                Ok(Sample { action: a, raw: self.instantiate(a, kind, ctx)?, logprob: lp[a] })
            })
            .collect()
    }

    /// Text for template `a` under a prompt kind.
    pub fn instantiate(&self, a: usize, kind: PromptKind, ctx: &PromptContext<'_>) -> Result<String> {
        let tag = match &self.vocab[a] {
            Template::Mention(t) => t.as_str(),
            Template::Unstructured => return Ok(unstructured(kind, ctx)),
        };
        let hist_tags = || -> String {
            let h = ctx.history.as_deref().unwrap_or(&[]);
            let r = ranked_tags(h, &self.tags);
            let top: Vec<&str> = r.iter().take(3).map(|(t, _)| t.as_str()).collect();
            if top.is_empty() {
                "varied".into()
            } else {
                top.join(", ")
            }
        };
        Ok(match kind {
            PromptKind::Rec => {
                let cands = ctx.candidates.as_ref().ok_or(Error::MissingSlot { kind: "rec", slot: "candidates" })?;
                let pick = cands.iter().find(|d| d.has_value(tag));
                let think = format!(
                    "The history leans toward {}. The user should enjoy a {tag} title, so I look for one among the candidates.",
                    hist_tags()
                );
                match pick {
                    Some(d) => format_output(&format!("{think} {} fits.", d.title), &d.title),
                    None => format_output(&format!("{think} None is listed."), &format!("An unlisted {tag} title")),
                }
            }
            PromptKind::Pattern => {
                let h = ctx.history.as_ref().ok_or(Error::MissingSlot { kind: "pattern", slot: "history" })?;
                let p = pattern_from_history(h, &self.tags);
                format_output(&format!("Counting attributes over the history gives {}.", hist_tags()), &pattern_text(&p))
            }
            PromptKind::Reason => {
                let item = ctx.item.ok_or(Error::MissingSlot { kind: "reason", slot: "item" })?;
                let think = format!(
                    "The user's history is mostly {}. {} carries {}. The shared element is {tag}.",
                    hist_tags(),
                    item.title,
                    item_tags(item)
                );
                format_output(&think, &reason_sentence(tag))
            }
            PromptKind::Update => {
                let item = ctx.item.ok_or(Error::MissingSlot { kind: "update", slot: "item" })?;
                let pattern = ctx.pattern.ok_or(Error::MissingSlot { kind: "update", slot: "pattern" })?;
                let old = parse_pattern(pattern, &self.tags);
                let new_tag = if item.has_value(tag) {
                    tag.to_string()
                } else {
                    item.attributes.iter().map(|a| a.value.clone()).find(|v| self.tags.binary_search(v).is_ok()).unwrap_or_else(|| tag.to_string())
                };
                let new = update_pattern(&old, &new_tag);
                let think = format!("{} carries {}. The pattern absorbs {new_tag}.", item.title, item_tags(item));
                format_output(&think, &format!("{}\n{}", pattern_text(&new), reason_sentence(tag)))
            }
        })
    }
}

fn item_tags(item: &ItemDescription) -> String {
    let v: Vec<&str> = item.attributes.iter().map(|a| a.value.as_str()).collect();
    if v.is_empty() {
        "no listed attributes".into()
    } else {
        v.join(", ")
    }
}

fn unstructured(kind: PromptKind, ctx: &PromptContext<'_>) -> String {
    match (kind, ctx.candidates.as_ref().and_then(|c| c.first())) {
        (PromptKind::Rec, Some(d)) => format!("I would suggest {} to this user.", d.title),
        _ => "The user might like this, it seems like a reasonable choice.".into(),
    }
}

impl CategoricalPolicy for SurrogatePolicy {
    type Context = Features;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn num_actions(&self) -> usize {
        self.vocab.len()
    }

    fn log_probs_taped(&self, tape: &mut Tape, vars: &[Var], ctx: &Features) -> crate::ndkernel::Result<Var> {
        let phi = tape.constant_shared(Arc::clone(&ctx.0));
        let fw = tape.matmul(phi, vars[self.weights.index()])?;
        let fw = tape.reshape(fw, vec![1, self.vocab.len()])?;
        let logits = tape.add(fw, vars[self.logits.index()])?;
        let logits = tape.scale(logits, 1.0 / self.temperature)?;
        tape.log_softmax_rows(logits)
    }
}
