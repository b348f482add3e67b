//! Run configuration and the pipeline stages. Each stage reads the outputs of
//! earlier stages from its own directory under `out_dir`, writes only to its
//! own directory, and records the resolved configuration there.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correction::{self, CorrectionConfig, Corrector, Phase, StoreLog, Stores};
use crate::datasets::{self, FilterConfig, Format, LoadOptions, SplitDataset};
use crate::error::{Error, IoContext, Result};
use crate::eval::{self, MetricsReport, ModelScorer, TimingReport};
use crate::grpo::StepStats;
use crate::pretrain_reward::{pretrain_policy, PretrainConfig};
use crate::reward_model::{
    self, write_attention_export, EncoderMode, HashingEncoder, RemoteEncoder, RewardModel, RewardModelConfig,
    TextEncoder, TextFeatures, TrainConfig, TrainReport,
};
use crate::textgen::surrogate::attribute_vocab;
use crate::textgen::{
    DecodingParams, EndpointConfig, GenerationLog, GenerationRecord, GeneratorBackend, PromptContext, PromptKind,
    PromptTemplates, RemoteBackend, RemoteClient, SurrogatePolicy, UreqTransport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub format: Format,
    pub ratings: PathBuf,
    pub meta: Option<PathBuf>,
    pub max_malformed_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: Format::MovielensDat,
            ratings: PathBuf::from("fixtures/synthetic/ratings.dat"),
            meta: None,
            max_malformed_frac: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Surrogate,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Surrogate softmax temperature.
    pub temperature: f64,
    /// Attribute kind the surrogate templates are built from; all kinds when unset.
    pub attribute_kind: Option<String>,
    pub templates: PromptTemplates,
    pub decoding: DecodingParams,
    pub endpoint: EndpointConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Surrogate,
            temperature: 1.0,
            attribute_kind: Some("genre".into()),
            templates: PromptTemplates::default(),
            decoding: DecodingParams::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { seed: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub batch_size: usize,
    pub warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: eval::DEFAULT_KS.to_vec(), batch_size: 128, warmup: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub filter: FilterConfig,
    pub backend: BackendConfig,
    pub encoder: EncoderMode,
    pub pretrain: PretrainConfig,
    pub bootstrap: BootstrapConfig,
    pub model: RewardModelConfig,
    pub train: TrainConfig,
    pub correct: CorrectionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            filter: FilterConfig::default(),
            backend: BackendConfig::default(),
            encoder: EncoderMode::HashingBag,
            pretrain: PretrainConfig::default(),
            bootstrap: BootstrapConfig::default(),
            model: RewardModelConfig::default(),
            train: TrainConfig::default(),
            correct: CorrectionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.ratings);
        if let Some(m) = self.data.meta.as_mut() {
            fix(m);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.grpo.validate()?;
        self.correct.grpo.validate()?;
        if !(self.backend.temperature > 0.0 && self.backend.temperature.is_finite()) {
            return Err(Error::Config("backend.temperature must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and positive".into()));
        }
        if self.eval.batch_size == 0 || self.train.batch_users == 0 || self.correct.micro_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.max_malformed_frac) {
            return Err(Error::Config("data.max_malformed_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which reward model a stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// No pattern/reason matching: the head sees only `[e_u, e_i]`.
    SequenceOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SequenceOnly => "sequence-only",
        }
    }
}

/// Which stores feed the matcher at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreChoice {
    Bootstrap,
    Corrected,
}

impl StoreChoice {
    pub fn name(self) -> &'static str {
        match self {
            StoreChoice::Bootstrap => "bootstrap",
            StoreChoice::Corrected => "corrected",
        }
    }
}

/// Stage directories under `out_dir`.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn split(&self) -> PathBuf {
        self.stage("prepare")
    }

    pub fn policy(&self) -> PathBuf {
        self.stage("pretrain").join("policy")
    }

    pub fn stores(&self, which: StoreChoice) -> PathBuf {
        let stage = match which {
            StoreChoice::Bootstrap => "bootstrap",
            StoreChoice::Corrected => "correct",
        };
        self.stage(stage).join("stores.snapshot.json")
    }

    pub fn model(&self, v: Variant) -> PathBuf {
        match v {
            Variant::Full => self.stage("train-rm").join("model"),
            Variant::SequenceOnly => self.stage("train-rm-seq").join("model"),
        }
    }

    pub fn eval_dir(&self, v: Variant, stores: StoreChoice) -> PathBuf {
        match v {
            Variant::Full => self.stage("eval").join(format!("full-{}", stores.name())),
            Variant::SequenceOnly => self.stage("eval").join("sequence-only"),
        }
    }
}

fn require(path: &Path, command: &'static str, what: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Prerequisite { command, what, path: path.to_path_buf() })
    }
}

fn start_stage(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()?).at(&p)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).at(path)
}

pub fn load_split(cfg: &RunConfig) -> Result<SplitDataset> {
    let dir = Layout::new(&cfg.out_dir).split();
    require(&dir.join("interactions.tsv"), "prepare", "prepared split")?;
    datasets::read_split(&dir)
}

pub fn load_policy(cfg: &RunConfig) -> Result<SurrogatePolicy> {
    let dir = Layout::new(&cfg.out_dir).policy();
    require(&dir.join("policy.ckpt"), "pretrain", "pretrained policy")?;
    SurrogatePolicy::load(&dir)
}

pub fn load_stores(cfg: &RunConfig, which: StoreChoice) -> Result<Stores> {
    let p = Layout::new(&cfg.out_dir).stores(which);
    let command = match which {
        StoreChoice::Bootstrap => "bootstrap",
        StoreChoice::Corrected => "correct",
    };
    require(&p, command, "pattern and reason stores")?;
    Stores::load_snapshot(&p)
}

pub fn load_model(cfg: &RunConfig, v: Variant) -> Result<RewardModel> {
    let dir = Layout::new(&cfg.out_dir).model(v);
    let command = match v {
        Variant::Full => "train-rm",
        Variant::SequenceOnly => "train-rm --sequence-only",
    };
    require(&dir.join("params.ckpt"), command, "reward model")?;
    RewardModel::load(&dir)
}

pub fn encoder(cfg: &RunConfig) -> Result<Box<dyn TextEncoder + Send + Sync>> {
    Ok(match cfg.encoder {
        EncoderMode::HashingBag => Box::new(HashingEncoder::new(cfg.model.dim)),
        EncoderMode::RemoteEmbedding => Box::new(RemoteEncoder::new(remote_client(cfg)?, cfg.model.dim)),
    })
}

fn remote_client(cfg: &RunConfig) -> Result<RemoteClient<UreqTransport>> {
    let mut ep = EndpointConfig::from_env()?;
    let c = &cfg.backend.endpoint;
    ep.max_retries = c.max_retries;
    ep.backoff_ms = c.backoff_ms;
    ep.timeout_secs = c.timeout_secs;
    ep.redact_prompts = c.redact_prompts;
    Ok(RemoteClient::connect(ep))
}

/// A fresh surrogate over the catalog's attribute vocabulary.
pub fn initial_policy(cfg: &RunConfig, split: &SplitDataset) -> Result<SurrogatePolicy> {
    let tags = attribute_vocab(&split.catalog, cfg.backend.attribute_kind.as_deref());
    SurrogatePolicy::from_tags(tags, cfg.backend.temperature)
}

pub fn prepare(cfg: &RunConfig) -> Result<SplitDataset> {
    let dir = Layout::new(&cfg.out_dir).split();
    if !cfg.data.ratings.exists() {
        return Err(Error::Config(format!("data.ratings: {} does not exist", cfg.data.ratings.display())));
    }
    start_stage(cfg, &dir)?;
    let opts = LoadOptions { meta: cfg.data.meta.clone(), max_malformed_frac: cfg.data.max_malformed_frac };
    let loaded = datasets::load_ratings(&cfg.data.ratings, cfg.data.format, &opts)?;
    let kept = datasets::filter(&loaded.interactions, &cfg.filter);
    let split = datasets::leave_one_out_split(&kept, &loaded.catalog);
    datasets::write_split(&dir, &split)?;
    write_json(&dir.join("load_report.json"), &loaded.report)?;
    tracing::info!(
        users = split.n_users(),
        items = split.n_items(),
        interactions = split.stats.n_interactions,
        "prepared split"
    );
    Ok(split)
}

pub fn pretrain(cfg: &RunConfig) -> Result<Vec<StepStats>> {
    let split = load_split(cfg)?;
    if cfg.backend.kind == BackendKind::Remote {
        return Err(Error::Config("pretraining runs on the surrogate backend only".into()));
    }
    let dir = Layout::new(&cfg.out_dir).stage("pretrain");
    start_stage(cfg, &dir)?;
    let mut policy = initial_policy(cfg, &split)?;
    let log = pretrain_policy(&split, &mut policy, &cfg.pretrain)?;
    policy.save(&dir.join("policy"))?;
    let p = dir.join("log.tsv");
    let mut s = format!("{}\n", StepStats::TSV_HEADER);
    for (k, st) in log.iter().enumerate() {
        s.push_str(&st.tsv_row(k));
        s.push('\n');
    }
    std::fs::write(&p, s).at(&p)?;
    Ok(log)
}

/// Records every remote generation to a JSON-lines log.
struct LoggedBackend<'a, G: GeneratorBackend> {
    inner: G,
    log: std::sync::Mutex<&'a mut GenerationLog>,
}

impl<G: GeneratorBackend> GeneratorBackend for LoggedBackend<'_, G> {
    fn capabilities(&self) -> crate::textgen::Capabilities {
        self.inner.capabilities()
    }

    fn generate(&self, kind: PromptKind, ctx: &PromptContext<'_>, rng: &mut dyn rand::RngCore) -> Result<String> {
        let raw = self.inner.generate(kind, ctx, rng)?;
        let rec = GenerationRecord {
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs() as i64),
            kind,
            user: None,
            item: ctx.item.map(|d| d.item_id.clone()),
            raw: raw.clone(),
        };
        self.log.lock().expect("generation log lock").append(&rec)?;
        Ok(raw)
    }
}

pub fn bootstrap(cfg: &RunConfig) -> Result<correction::BootstrapReport> {
    let split = load_split(cfg)?;
    let dir = Layout::new(&cfg.out_dir).stage("bootstrap");
    let policy = match cfg.backend.kind {
        BackendKind::Surrogate => Some(load_policy(cfg)?),
        BackendKind::Remote => None,
    };
    start_stage(cfg, &dir)?;
    let mut log = StoreLog::create(&dir.join("stores.jsonl"))?;
    let (stores, report) = match policy {
        Some(p) => correction::bootstrap_features(&split, &p, cfg.bootstrap.seed, Some(&mut log))?,
        None => {
            let mut gl = GenerationLog::open(&dir.join("generations.jsonl"))?;
            let backend = LoggedBackend {
                inner: RemoteBackend {
                    client: remote_client(cfg)?,
                    templates: cfg.backend.templates.clone(),
                    decoding: cfg.backend.decoding.clone(),
                },
                log: std::sync::Mutex::new(&mut gl),
            };
            let out = correction::bootstrap_features(&split, &backend, cfg.bootstrap.seed, Some(&mut log))?;
            gl.flush()?;
            out
        }
    };
    stores.save_snapshot(&dir.join("stores.snapshot.json"))?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// Rendered bootstrap prompts for the first `limit` users, without generating.
pub fn dry_run_prompts(cfg: &RunConfig, limit: usize) -> Result<Vec<String>> {
    let split = load_split(cfg)?;
    let mut out = Vec::new();
    for seq in split.train.iter().filter(|s| !s.items.is_empty()).take(limit) {
        let history: Vec<_> = seq.items.iter().map(|&i| &split.catalog[i]).collect();
        let ctx = PromptContext { history: Some(history.clone()), ..Default::default() };
        out.push(cfg.backend.templates.render(PromptKind::Pattern, &ctx)?);
        let ctx = PromptContext {
            history: Some(history),
            pattern: Some("<pattern>"),
            item: Some(&split.catalog[seq.items[0]]),
            ..Default::default()
        };
        out.push(cfg.backend.templates.render(PromptKind::Reason, &ctx)?);
    }
    Ok(out)
}

/// Text features for a variant; the sequence-only model ignores them.
pub fn features_for(
    cfg: &RunConfig,
    split: &SplitDataset,
    v: Variant,
    which: StoreChoice,
    enc: &dyn TextEncoder,
) -> Result<TextFeatures> {
    match v {
        Variant::Full => correction::text_features(&load_stores(cfg, which)?, enc),
        Variant::SequenceOnly => Ok(TextFeatures {
            patterns: vec![vec![0.0; cfg.model.dim]; split.n_users()],
            reasons: vec![Vec::new(); split.n_items()],
            missing_patterns: 0,
        }),
    }
}

pub fn train_rm(cfg: &RunConfig, v: Variant) -> Result<TrainReport> {
    let split = load_split(cfg)?;
    let enc = encoder(cfg)?;
    let features = features_for(cfg, &split, v, StoreChoice::Bootstrap, enc.as_ref())?;
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.model(v).parent().expect("model dir has a parent").to_path_buf();
    start_stage(cfg, &dir)?;
    let mut mcfg = cfg.model.clone();
    mcfg.use_match = v == Variant::Full;
    let mut model = RewardModel::new(mcfg, split.n_items())?;
    let examples = reward_model::user_examples(&split, cfg.model.max_seq_len);
    let report = reward_model::train(&mut model, &examples, &features, &cfg.train)?;
    model.save(&layout.model(v))?;
    let p = dir.join("loss.tsv");
    let mut s = String::from("step\tloss\n");
    for (k, l) in report.step_losses.iter().enumerate() {
        s.push_str(&format!("{k}\t{l}\n"));
    }
    std::fs::write(&p, s).at(&p)?;
    write_json(&dir.join("epochs.json"), &report.epoch_losses)?;
    Ok(report)
}

/// Runs (or, with `resume`, continues) the chronological correction sweep.
pub fn correct(cfg: &RunConfig, resume: bool) -> Result<correction::CorrectionState> {
    if cfg.backend.kind == BackendKind::Remote {
        return Err(Error::Config("correction trains the policy and needs the surrogate backend".into()));
    }
    let split = load_split(cfg)?;
    let model = load_model(cfg, Variant::Full)?;
    let policy = load_policy(cfg)?;
    let stores = load_stores(cfg, StoreChoice::Bootstrap)?;
    let enc = encoder(cfg)?;
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.stage("correct");
    let ckpt = dir.join("checkpoint");
    let log_path = dir.join("stores.jsonl");
    let mut c = if resume && ckpt.join("state.json").exists() {
        Corrector::resume(&split, &model, enc.as_ref(), cfg.correct.clone(), &ckpt, Some(&log_path))?
    } else {
        start_stage(cfg, &dir)?;
        let src = layout.stage("bootstrap").join("stores.jsonl");
        std::fs::copy(&src, &log_path).at(&src)?;
        Corrector::new(&split, &model, enc.as_ref(), cfg.correct.clone(), policy, stores)?
            .with_log(StoreLog::append_to(&log_path)?)
    };
    c.run(Some(&ckpt))?;
    if c.state().cursor == c.schedule().len() {
        c.state().policy.save(&dir.join("policy"))?;
        c.state().stores.save_snapshot(&dir.join("stores.snapshot.json"))?;
    } else {
        c.save_checkpoint(&ckpt)?;
    }
    let p = dir.join("steps.tsv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&p).at(&p)?);
    c.write_step_log(&mut f).at(&p)?;
    f.flush().at(&p)?;
    Ok(c.into_state())
}

pub fn evaluate(cfg: &RunConfig, v: Variant, which: StoreChoice) -> Result<MetricsReport> {
    let split = load_split(cfg)?;
    let model = load_model(cfg, v)?;
    let enc = encoder(cfg)?;
    let features = features_for(cfg, &split, v, which, enc.as_ref())?;
    let scorer = ModelScorer::new(&model, &split, &features)?;
    let mut report = eval::evaluate(&scorer, &split, &cfg.eval.ks)?;
    report.missing_patterns = features.missing_patterns;
    let dir = Layout::new(&cfg.out_dir).eval_dir(v, which);
    start_stage(cfg, &dir)?;
    let p = dir.join("metrics.tsv");
    std::fs::write(&p, report.to_tsv()).at(&p)?;
    write_json(&dir.join("metrics.json"), &report)?;
    Ok(report)
}

pub fn bench(cfg: &RunConfig, v: Variant, which: StoreChoice) -> Result<TimingReport> {
    let split = load_split(cfg)?;
    let model = load_model(cfg, v)?;
    let enc = encoder(cfg)?;
    let features = features_for(cfg, &split, v, which, enc.as_ref())?;
    let scorer = ModelScorer::new(&model, &split, &features)?;
    let users: Vec<usize> = (0..split.n_users()).collect();
    let report = eval::timing_benchmark(&scorer, &users, cfg.eval.batch_size, cfg.eval.warmup)?;
    let dir = Layout::new(&cfg.out_dir).stage("bench");
    start_stage(cfg, &dir)?;
    write_json(&dir.join(format!("{}.json", v.name())), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseExport {
    pub user: String,
    pub item: String,
    pub stores: StoreChoice,
    pub pattern: Option<String>,
    pub reasons: Vec<String>,
    pub reason_phases: Vec<Phase>,
    pub score: f64,
}

/// Attention of one user's pattern over one item's reasons, with the texts.
pub fn export_case(cfg: &RunConfig, user_id: &str, item_id: &str, which: StoreChoice) -> Result<PathBuf> {
    let split = load_split(cfg)?;
    let model = load_model(cfg, Variant::Full)?;
    let stores = load_stores(cfg, which)?;
    let u = split.user_index(user_id).ok_or_else(|| Error::Unknown { kind: "user", id: user_id.into() })?;
    let i = split.item_index(item_id).ok_or_else(|| Error::Unknown { kind: "item", id: item_id.into() })?;
    let enc = encoder(cfg)?;
    let pattern = stores.pattern(u).map(str::to_string);
    let p = enc.encode(pattern.as_deref().unwrap_or(""))?;
    let entries = &stores.reasons[i];
    let texts: Vec<&str> = entries.iter().map(|e| e.text.as_str()).collect();
    let q = reward_model::encode_all(enc.as_ref(), &texts)?;
    let m = model.match_reasons(&p, &q)?;
    let score = model.score(&split.train[u].items, i, &p, &q)?;
    let dir = Layout::new(&cfg.out_dir).stage("export-case").join(format!("{user_id}_{item_id}"));
    start_stage(cfg, &dir)?;
    let path = dir.join("attention.tsv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).at(&path)?);
    write_attention_export(&mut f, user_id, item_id, &m).at(&path)?;
    f.flush().at(&path)?;
    let case = CaseExport {
        user: user_id.into(),
        item: item_id.into(),
        stores: which,
        pattern,
        reasons: texts.iter().map(|t| t.to_string()).collect(),
        reason_phases: entries.iter().map(|e| e.phase).collect(),
        score,
    };
    write_json(&dir.join("case.json"), &case)?;
    Ok(dir)
}
