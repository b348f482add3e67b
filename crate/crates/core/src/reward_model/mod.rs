//! Pattern/reason matcher fused with a causal sequence encoder through a DIN
//! head. The same network scores candidate reasons during correction and
//! ranks items at evaluation time.

mod encoder;
mod train;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{encode_all, fnv1a64, l2_normalize, tokenize, EncoderMode, HashingEncoder, RemoteEncoder, TextEncoder};
pub use train::{train, user_examples, TrainConfig, TrainReport, UserExample};

use crate::error::{Error, IoContext, Result};
use crate::ndkernel::{
    self, attention, causal_transformer, init_uniform, linear, AttentionParams, ParamId, ParamStore, Segments, Tape,
    Tensor, TransformerLayer, TransformerParams, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserPosition {
    /// Hidden state at the most recent item.
    Last,
    /// Hidden state at the oldest item.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub match_heads: usize,
    pub max_seq_len: usize,
    pub user_position: UserPosition,
    /// `false` drops the matcher and feeds only `[e_u, e_i]` to the head.
    pub use_match: bool,
    pub init_seed: u64,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            match_heads: 2,
            max_seq_len: 64,
            user_position: UserPosition::Last,
            use_match: true,
            init_seed: 7,
        }
    }
}

impl RewardModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("reward model dim and max_seq_len must be positive".into()));
        }
        for (name, h) in [("heads", self.heads), ("match_heads", self.match_heads)] {
            if h == 0 || self.dim % h != 0 {
                return Err(Error::Config(format!("{name}={h} must divide dim={}", self.dim)));
            }
        }
        Ok(())
    }

    fn din_input(&self) -> usize {
        if self.use_match {
            3 * self.dim
        } else {
            2 * self.dim
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: [ParamId; 4],
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    item_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    matcher: Option<([ParamId; 4], ParamId)>,
    din: [ParamId; 6],
}

impl Ids {
    fn resolve(store: &ParamStore, cfg: &RewardModelConfig) -> Result<Self> {
        let id = |n: String| store.id(&n).ok_or_else(|| Error::Unknown { kind: "parameter", id: n });
        let attn = |p: &str| -> Result<[ParamId; 4]> {
            Ok([id(format!("{p}.wq"))?, id(format!("{p}.wk"))?, id(format!("{p}.wv"))?, id(format!("{p}.wo"))?])
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(LayerIds {
                    ln1_g: id(format!("tf.{l}.ln1.g"))?,
                    ln1_b: id(format!("tf.{l}.ln1.b"))?,
                    attn: attn(&format!("tf.{l}.attn"))?,
                    ln2_g: id(format!("tf.{l}.ln2.g"))?,
                    ln2_b: id(format!("tf.{l}.ln2.b"))?,
                    w1: id(format!("tf.{l}.ffn.w1"))?,
                    b1: id(format!("tf.{l}.ffn.b1"))?,
                    w2: id(format!("tf.{l}.ffn.w2"))?,
                    b2: id(format!("tf.{l}.ffn.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let matcher = if cfg.use_match { Some((attn("match")?, id("match.no_reason".into())?)) } else { None };
        let din = ["w1", "b1", "w2", "b2", "w3", "b3"].map(|n| format!("din.{n}"));
        let din = [
            id(din[0].clone())?,
            id(din[1].clone())?,
            id(din[2].clone())?,
            id(din[3].clone())?,
            id(din[4].clone())?,
            id(din[5].clone())?,
        ];
        Ok(Self {
            item_emb: id("item_emb".into())?,
            pos_emb: id("pos_emb".into())?,
            layers,
            lnf_g: id("tf.ln_f.g".into())?,
            lnf_b: id("tf.ln_f.b".into())?,
            matcher,
            din,
        })
    }
}

/// Output of the pattern/reason matcher for one user-item pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRepresentation {
    pub s_ui: Vec<f64>,
    /// Per head, one weight per reason in the order given.
    pub attention_weights: Vec<Vec<f64>>,
}

/// Reason embeddings of the whole catalog in segment form.
///
/// Identical embeddings share one row of `unique`, whose rows are stored in
/// canonical (bitwise) order; each item's entries are sorted the same way, so
/// scoring does not depend on the order reasons were appended. An item without
/// reasons points at row `unique.rows()`, the learned no-reason row.
#[derive(Clone, Debug)]
pub struct ReasonBank {
    unique: Arc<Tensor>,
    lists: Vec<Vec<usize>>,
    segs: Arc<Segments>,
}

fn cmp_rows(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

impl ReasonBank {
    pub fn build(reasons: &[Vec<Vec<f64>>], dim: usize) -> Result<Self> {
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut raw_lists = Vec::with_capacity(reasons.len());
        for list in reasons {
            let mut l = Vec::with_capacity(list.len());
            for r in list {
                if r.len() != dim {
                    return Err(Error::Config(format!("reason embedding of width {} for model dim {dim}", r.len())));
                }
                let key: Vec<u64> = r.iter().map(|x| x.to_bits()).collect();
                let k = *index.entry(key).or_insert_with(|| {
                    rows.push(r);
                    rows.len() - 1
                });
                l.push(k);
            }
            raw_lists.push(l);
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| cmp_rows(rows[a], rows[b]));
        let mut rank = vec![0; rows.len()];
        for (r, &k) in order.iter().enumerate() {
            rank[k] = r;
        }
        let data: Vec<f64> = order.iter().flat_map(|&k| rows[k].iter().copied()).collect();
        let unique = Tensor::new(vec![rows.len(), dim], data)?;
        let fallback = rows.len();
        let lists: Vec<Vec<usize>> = raw_lists
            .into_iter()
            .map(|l| {
                if l.is_empty() {
                    vec![fallback]
                } else {
                    let mut l: Vec<usize> = l.into_iter().map(|k| rank[k]).collect();
                    l.sort_unstable();
                    l
                }
            })
            .collect();
        let segs = Arc::new(Segments::new(&lists)?);
        Ok(Self { unique: Arc::new(unique), lists, segs })
    }

    pub fn n_items(&self) -> usize {
        self.lists.len()
    }

    pub fn unique_rows(&self) -> usize {
        self.unique.rows()
    }

    fn subset(&self, items: &[usize]) -> Result<Arc<Segments>> {
        let lists: Vec<Vec<usize>> = items.iter().map(|&i| self.lists[i].clone()).collect();
        Ok(Arc::new(Segments::new(&lists)?))
    }
}

/// Embedded patterns (one per user) and reason lists (one per item).
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub patterns: Vec<Vec<f64>>,
    pub reasons: Vec<Vec<Vec<f64>>>,
    /// Users whose pattern was missing and replaced by the zero query.
    pub missing_patterns: usize,
}

#[derive(Clone, Debug)]
pub struct RewardModel {
    cfg: RewardModelConfig,
    n_items: usize,
    params: ParamStore,
    ids: Ids,
}

fn din_dims(cfg: &RewardModelConfig) -> [(String, Vec<usize>, usize); 6] {
    let d = cfg.dim;
    let din = cfg.din_input();
    [
        ("din.w1".into(), vec![din, 2 * d], din),
        ("din.b1".into(), vec![1, 2 * d], 0),
        ("din.w2".into(), vec![2 * d, d], 2 * d),
        ("din.b2".into(), vec![1, d], 0),
        ("din.w3".into(), vec![d, 1], d),
        ("din.b3".into(), vec![1, 1], 0),
    ]
}

impl RewardModel {
    /// Fresh parameters drawn from `cfg.init_seed`.
    pub fn new(cfg: RewardModelConfig, n_items: usize) -> Result<Self> {
        cfg.validate()?;
        if n_items == 0 {
            return Err(Error::Config("reward model needs a non-empty catalog".into()));
        }
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut s = ParamStore::new();
        s.add("item_emb", init_uniform(&mut rng, vec![n_items, d], d))?;
        s.add("pos_emb", init_uniform(&mut rng, vec![cfg.max_seq_len, d], d))?;
        for l in 0..cfg.layers {
            s.add(format!("tf.{l}.ln1.g"), Tensor::full(vec![1, d], 1.0))?;
            s.add(format!("tf.{l}.ln1.b"), Tensor::zeros(vec![1, d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                s.add(format!("tf.{l}.attn.{w}"), init_uniform(&mut rng, vec![d, d], d))?;
            }
            s.add(format!("tf.{l}.ln2.g"), Tensor::full(vec![1, d], 1.0))?;
            s.add(format!("tf.{l}.ln2.b"), Tensor::zeros(vec![1, d]))?;
            s.add(format!("tf.{l}.ffn.w1"), init_uniform(&mut rng, vec![d, d], d))?;
            s.add(format!("tf.{l}.ffn.b1"), Tensor::zeros(vec![1, d]))?;
            s.add(format!("tf.{l}.ffn.w2"), init_uniform(&mut rng, vec![d, d], d))?;
            s.add(format!("tf.{l}.ffn.b2"), Tensor::zeros(vec![1, d]))?;
        }
        s.add("tf.ln_f.g", Tensor::full(vec![1, d], 1.0))?;
        s.add("tf.ln_f.b", Tensor::zeros(vec![1, d]))?;
        if cfg.use_match {
            for w in ["wq", "wk", "wv", "wo"] {
                s.add(format!("match.{w}"), init_uniform(&mut rng, vec![d, d], d))?;
            }
            s.add("match.no_reason", init_uniform(&mut rng, vec![1, d], d))?;
        }
        for (name, shape, fan_in) in din_dims(&cfg) {
            let t = if fan_in == 0 { Tensor::zeros(shape) } else { init_uniform(&mut rng, shape, fan_in) };
            s.add(name, t)?;
        }
        Self::from_params(cfg, s)
    }

    pub fn from_params(cfg: RewardModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ids = Ids::resolve(&params, &cfg)?;
        let item = params.get(ids.item_emb).shape().to_vec();
        if item.len() != 2 || item[1] != cfg.dim {
            return Err(Error::Config(format!("item table shape {item:?} does not match dim {}", cfg.dim)));
        }
        if params.get(ids.pos_emb).rows() != cfg.max_seq_len {
            return Err(Error::Config("positional table does not match max_seq_len".into()));
        }
        for (name, shape, _) in din_dims(&cfg) {
            let got = params.get(params.id(&name).expect("resolved above")).shape();
            if got != shape.as_slice() {
                return Err(Error::Config(format!("{name} has shape {got:?}, expected {shape:?}")));
            }
        }
        Ok(Self { n_items: item[0], cfg, params, ids })
    }

    pub fn config(&self) -> &RewardModelConfig {
        &self.cfg
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let cfg_path = dir.join("model.json");
        let meta = serde_json::json!({ "config": self.cfg, "n_items": self.n_items });
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&meta)?).at(&cfg_path)?;
        ndkernel::save_checkpoint(&dir.join("params.ckpt"), &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("model.json");
        let text = std::fs::read_to_string(&cfg_path).at(&cfg_path)?;
        let meta: serde_json::Value = serde_json::from_str(&text)?;
        let cfg: RewardModelConfig = serde_json::from_value(meta["config"].clone())?;
        let params = ndkernel::load_checkpoint(&dir.join("params.ckpt"))?;
        Self::from_params(cfg, params)
    }

    /// The most recent `max_seq_len` items.
    pub fn window<'a>(&self, seq: &'a [usize]) -> &'a [usize] {
        &seq[seq.len().saturating_sub(self.cfg.max_seq_len)..]
    }

    fn transformer(&self, vars: &[Var]) -> TransformerParams {
        let v = |id: ParamId| vars[id.index()];
        TransformerParams {
            pos: v(self.ids.pos_emb),
            layers: self
                .ids
                .layers
                .iter()
                .map(|l| TransformerLayer {
                    ln1_g: v(l.ln1_g),
                    ln1_b: v(l.ln1_b),
                    attn: AttentionParams { wq: v(l.attn[0]), wk: v(l.attn[1]), wv: v(l.attn[2]), wo: v(l.attn[3]) },
                    ln2_g: v(l.ln2_g),
                    ln2_b: v(l.ln2_b),
                    w1: v(l.w1),
                    b1: v(l.b1),
                    w2: v(l.w2),
                    b2: v(l.b2),
                })
                .collect(),
            lnf_g: v(self.ids.lnf_g),
            lnf_b: v(self.ids.lnf_b),
            heads: self.cfg.heads,
        }
    }

    fn matcher(&self, vars: &[Var]) -> Result<(AttentionParams, Var)> {
        let (w, nr) = self.ids.matcher.ok_or_else(|| Error::Config("sequence-only model has no matcher".into()))?;
        let v = |id: ParamId| vars[id.index()];
        Ok((AttentionParams { wq: v(w[0]), wk: v(w[1]), wv: v(w[2]), wo: v(w[3]) }, v(nr)))
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        match items.iter().find(|&&i| i >= self.n_items) {
            Some(i) => Err(Error::Unknown { kind: "item", id: i.to_string() }),
            None => Ok(()),
        }
    }

    /// Hidden states (`L x d`) of the causal encoder over `items`.
    pub fn sequence_states(&self, tape: &mut Tape, vars: &[Var], items: &[usize]) -> Result<Var> {
        self.check_items(items)?;
        if items.len() > self.cfg.max_seq_len {
            return Err(ndkernel::KernelError::SequenceTooLong { len: items.len(), max: self.cfg.max_seq_len }.into());
        }
        let e = tape.gather_rows(vars[self.ids.item_emb.index()], Arc::new(items.to_vec()))?;
        Ok(causal_transformer(tape, e, &self.transformer(vars))?)
    }

    /// The user row `e_u` (`1 x d`) picked from the encoder states.
    pub fn user_row(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        let l = tape.value(states).rows();
        let at = match self.cfg.user_position {
            UserPosition::Last => l - 1,
            UserPosition::First => 0,
        };
        Ok(tape.slice_rows(states, at, 1)?)
    }

    /// Rows of `states` used as user vectors for next-item prediction: row `t`
    /// predicts the item after position `t`.
    pub fn prediction_rows(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        match self.cfg.user_position {
            UserPosition::Last => Ok(states),
            UserPosition::First => {
                let l = tape.value(states).rows();
                Ok(tape.gather_rows(states, Arc::new(vec![0; l]))?)
            }
        }
    }

    /// Attention of the pattern embedding over one reason list.
    pub fn match_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        query: Var,
        reasons: &[Vec<f64>],
    ) -> Result<ndkernel::AttentionOutput> {
        let (p, no_reason) = self.matcher(vars)?;
        let keys = if reasons.is_empty() {
            no_reason
        } else {
            if let Some(r) = reasons.iter().find(|r| r.len() != self.cfg.dim) {
                return Err(Error::Config(format!("reason embedding of width {} for model dim {}", r.len(), self.cfg.dim)));
            }
            tape.constant(Tensor::from_rows(reasons)?)
        };
        Ok(attention(tape, query, keys, keys, self.cfg.match_heads, &p)?)
    }

    /// Matching rows (`n x d`) for every item in `items`, or the whole catalog.
    pub fn match_all_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        query: Var,
        bank: &ReasonBank,
        items: Option<&[usize]>,
    ) -> Result<Var> {
        let (p, no_reason) = self.matcher(vars)?;
        if bank.n_items() != self.n_items {
            return Err(Error::Config(format!("reason bank covers {} items, model {}", bank.n_items(), self.n_items)));
        }
        let segs = match items {
            None => Arc::clone(&bank.segs),
            Some(items) => bank.subset(items)?,
        };
        let u = tape.constant_shared(Arc::clone(&bank.unique));
        let rows = if bank.unique_rows() == 0 { no_reason } else { tape.concat_rows(&[u, no_reason])? };
        let heads = self.cfg.match_heads;
        let dh = self.cfg.dim / heads;
        let q = tape.matmul(query, p.wq)?;
        let k = tape.matmul(rows, p.wk)?;
        let v = tape.matmul(rows, p.wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let w = tape.segment_softmax(s, Arc::clone(&segs))?;
            outs.push(tape.segment_weighted_sum(w, vh, Arc::clone(&segs))?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok(tape.matmul(cat, p.wo)?)
    }

    /// DIN head on one `[e_u, e_i, s_ui]` row; `s_ui` is absent for the
    /// sequence-only variant.
    pub fn din_taped(&self, tape: &mut Tape, vars: &[Var], e_u: Var, e_i: Var, s_ui: Option<Var>) -> Result<Var> {
        let parts: Vec<Var> = match (self.cfg.use_match, s_ui) {
            (true, Some(s)) => vec![e_u, e_i, s],
            (false, None) => vec![e_u, e_i],
            _ => return Err(Error::Config("matching vector presence does not match the model variant".into())),
        };
        let x = tape.concat_cols(&parts)?;
        let w = |k: usize| vars[self.ids.din[k].index()];
        let h = linear(tape, x, w(0), w(1))?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, w(2), w(3))?;
        let h = tape.gelu(h)?;
        Ok(linear(tape, h, w(4), w(5))?)
    }

    /// Scores (`T x n`) of every user row against every item row, with the
    /// first DIN layer split as `e_u W_u + (e_i W_i + s W_s + b)`.
    pub fn score_matrix_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        users: Var,
        items: Var,
        s: Option<Var>,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let w = |k: usize| vars[self.ids.din[k].index()];
        let (t, n) = (tape.value(users).rows(), tape.value(items).rows());
        let wu = tape.slice_rows(w(0), 0, d)?;
        let wi = tape.slice_rows(w(0), d, d)?;
        let a = tape.matmul(users, wu)?;
        let mut b = tape.matmul(items, wi)?;
        match (self.cfg.use_match, s) {
            (true, Some(s)) => {
                let ws = tape.slice_rows(w(0), 2 * d, d)?;
                let c = tape.matmul(s, ws)?;
                b = tape.add(b, c)?;
            }
            (false, None) => {}
            _ => return Err(Error::Config("matching rows presence does not match the model variant".into())),
        }
        let b = tape.add_row(b, w(1))?;
        let z = tape.outer_add(a, b)?;
        let z = tape.gelu(z)?;
        let z = linear(tape, z, w(2), w(3))?;
        let z = tape.gelu(z)?;
        let z = linear(tape, z, w(4), w(5))?;
        Ok(tape.reshape(z, vec![t, n])?)
    }

    fn frozen(&self) -> (Tape, Vec<Var>) {
        let mut tape = Tape::new();
        let vars = self.params.bind_all(&mut tape, false);
        (tape, vars)
    }

    fn check_dim(&self, v: &[f64], what: &'static str) -> Result<()> {
        if v.len() == self.cfg.dim {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} has width {}, model dim {}", v.len(), self.cfg.dim)))
        }
    }

    /// `e_u` for a history of at most `max_seq_len` items.
    pub fn encode_user_sequence(&self, items: &[usize]) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Err(Error::Config("cannot encode an empty history".into()));
        }
        let (mut tape, vars) = self.frozen();
        let h = self.sequence_states(&mut tape, &vars, items)?;
        let e = self.user_row(&mut tape, h)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn match_reasons(&self, pattern: &[f64], reasons: &[Vec<f64>]) -> Result<MatchRepresentation> {
        self.check_dim(pattern, "pattern embedding")?;
        let (mut tape, vars) = self.frozen();
        let q = tape.constant(Tensor::row(pattern.to_vec()));
        let out = self.match_taped(&mut tape, &vars, q, reasons)?;
        let mut weights = out.weights;
        if reasons.is_empty() {
            weights = vec![vec![]; self.cfg.match_heads];
        }
        Ok(MatchRepresentation { s_ui: tape.value(out.out).data().to_vec(), attention_weights: weights })
    }

    pub fn din_score(&self, e_u: &[f64], e_i: &[f64], s_ui: Option<&[f64]>) -> Result<f64> {
        self.check_dim(e_u, "e_u")?;
        self.check_dim(e_i, "e_i")?;
        let (mut tape, vars) = self.frozen();
        let u = tape.constant(Tensor::row(e_u.to_vec()));
        let i = tape.constant(Tensor::row(e_i.to_vec()));
        let s = match s_ui {
            Some(s) => {
                self.check_dim(s, "s_ui")?;
                Some(tape.constant(Tensor::row(s.to_vec())))
            }
            None => None,
        };
        let y = self.din_taped(&mut tape, &vars, u, i, s)?;
        Ok(tape.value(y).item())
    }

    /// `ŷ` for one pair, evaluated item by item.
    pub fn score(&self, history: &[usize], item: usize, pattern: &[f64], reasons: &[Vec<f64>]) -> Result<f64> {
        Ok(self.score_candidates(history, item, pattern, reasons, &[None])?[0])
    }

    /// `ŷ` for one pair under several reason lists `reasons ∪ {extra}`, sharing
    /// the sequence encoding. `None` scores the list as it is.
    pub fn score_candidates(
        &self,
        history: &[usize],
        item: usize,
        pattern: &[f64],
        reasons: &[Vec<f64>],
        extras: &[Option<Vec<f64>>],
    ) -> Result<Vec<f64>> {
        self.check_items(&[item])?;
        if history.is_empty() {
            return Err(Error::Config("cannot score with an empty history".into()));
        }
        let (mut tape, vars) = self.frozen();
        let h = self.sequence_states(&mut tape, &vars, self.window(history))?;
        let e_u = self.user_row(&mut tape, h)?;
        let e_i = tape.gather_rows(vars[self.ids.item_emb.index()], Arc::new(vec![item]))?;
        if !self.cfg.use_match {
            let y = self.din_taped(&mut tape, &vars, e_u, e_i, None)?;
            return Ok(vec![tape.value(y).item(); extras.len()]);
        }
        self.check_dim(pattern, "pattern embedding")?;
        let q = tape.constant(Tensor::row(pattern.to_vec()));
        let mut list = reasons.to_vec();
        extras
            .iter()
            .map(|extra| {
                list.truncate(reasons.len());
                if let Some(e) = extra {
                    list.push(e.clone());
                }
                let m = self.match_taped(&mut tape, &vars, q, &list)?;
                let y = self.din_taped(&mut tape, &vars, e_u, e_i, Some(m.out))?;
                Ok(tape.value(y).item())
            })
            .collect()
    }

    /// Full-catalog scores for one user.
    pub fn score_all(&self, history: &[usize], pattern: &[f64], bank: Option<&ReasonBank>) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::Config("cannot score with an empty history".into()));
        }
        let (mut tape, vars) = self.frozen();
        let h = self.sequence_states(&mut tape, &vars, self.window(history))?;
        let e_u = self.user_row(&mut tape, h)?;
        let s = if self.cfg.use_match {
            let bank = bank.ok_or_else(|| Error::Config("matching model needs a reason bank".into()))?;
            self.check_dim(pattern, "pattern embedding")?;
            let q = tape.constant(Tensor::row(pattern.to_vec()));
            Some(self.match_all_taped(&mut tape, &vars, q, bank, None)?)
        } else {
            None
        };
        let y = self.score_matrix_taped(&mut tape, &vars, e_u, vars[self.ids.item_emb.index()], s)?;
        let scores = tape.value(y).data().to_vec();
        debug_assert_eq!(scores.len(), self.n_items);
        Ok(scores)
    }

    /// Item-table row `e_i`.
    pub fn item_embedding(&self, item: usize) -> Result<Vec<f64>> {
        self.check_items(&[item])?;
        Ok(self.params.get(self.ids.item_emb).row_slice(item).to_vec())
    }

    pub fn item_table_id(&self) -> ParamId {
        self.ids.item_emb
    }
}

/// One row per (reason, head): `user  item  reason_index  head  weight`.
pub fn write_attention_export(
    out: &mut impl Write,
    user: &str,
    item: &str,
    m: &MatchRepresentation,
) -> std::io::Result<()> {
    writeln!(out, "user\titem\treason_index\thead\tweight")?;
    for (h, w) in m.attention_weights.iter().enumerate() {
        for (k, x) in w.iter().enumerate() {
            writeln!(out, "{user}\t{item}\t{k}\t{h}\t{x}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(use_match: bool) -> RewardModel {
        let cfg = RewardModelConfig { dim: 8, layers: 1, max_seq_len: 6, use_match, ..Default::default() };
        RewardModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn batched_matches_single_path() {
        let m = small(true);
        let enc = HashingEncoder::new(8);
        let reasons: Vec<Vec<Vec<f64>>> = vec![
            vec![enc.encode("war action").unwrap(), enc.encode("comedy").unwrap()],
            vec![],
            vec![enc.encode("comedy").unwrap()],
            vec![enc.encode("drama x").unwrap(), enc.encode("war").unwrap(), enc.encode("war action").unwrap()],
            vec![enc.encode("horror").unwrap()],
        ];
        let bank = ReasonBank::build(&reasons, 8).unwrap();
        assert_eq!(bank.unique_rows(), 5);
        let p = enc.encode("Core interest: War").unwrap();
        let hist = [0, 3, 2];
        let all = m.score_all(&hist, &p, Some(&bank)).unwrap();
        for (i, r) in reasons.iter().enumerate() {
            let one = m.score(&hist, i, &p, r).unwrap();
            assert!((one - all[i]).abs() < 1e-10, "item {i}: {one} vs {}", all[i]);
        }
    }

    #[test]
    fn sequence_only_has_no_matcher() {
        let m = small(false);
        assert!(m.params().id("match.wq").is_none());
        assert_eq!(m.params().get(m.params().id("din.w1").unwrap()).shape(), &[16, 16]);
        let all = m.score_all(&[1, 2], &[], None).unwrap();
        assert_eq!(all.len(), 5);
        assert!((m.score(&[1, 2], 4, &[], &[]).unwrap() - all[4]).abs() < 1e-10);
    }

    #[test]
    fn unknown_item_and_long_history() {
        let m = small(true);
        assert!(matches!(m.encode_user_sequence(&[9]), Err(Error::Unknown { .. })));
        assert!(m.encode_user_sequence(&[0; 7]).is_err());
        assert!(m.score_all(&[0; 9], &[0.0; 8], Some(&ReasonBank::build(&vec![vec![]; 5], 8).unwrap())).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small(true);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = RewardModel::load(dir.path()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }
}
