//! Prompt rendering, structured-output parsing and generator backends.

mod parse;
mod prompts;
pub mod remote;
pub mod surrogate;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use parse::{format_output, parse_structured_output, StructuredOutput};
pub use prompts::{render_prompt, PromptContext, PromptKind, PromptTemplates};
pub use remote::{DecodingParams, EndpointConfig, MockTransport, RemoteClient, Transport, TransportError, UreqTransport};
pub use surrogate::{Features, Sample, SurrogatePolicy, Template};

use crate::error::{IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub can_sample_group: bool,
    pub can_report_logprob: bool,
    pub trainable: bool,
}

/// Something that turns a prompt context into raw completion text.
pub trait GeneratorBackend {
    fn capabilities(&self) -> Capabilities;
    fn generate(&self, kind: PromptKind, ctx: &PromptContext<'_>, rng: &mut dyn RngCore) -> Result<String>;
}

/// Surrogate decoding: rec and reason prompts are sampled, the pattern prompt
/// follows the counting rule and the update prompt decodes greedily.
impl GeneratorBackend for SurrogatePolicy {
    fn capabilities(&self) -> Capabilities {
        Capabilities { can_sample_group: true, can_report_logprob: true, trainable: true }
    }

    fn generate(&self, kind: PromptKind, ctx: &PromptContext<'_>, rng: &mut dyn RngCore) -> Result<String> {
        let f = self.features(ctx);
        let lp = self.log_probs(&f);
        let a = match kind {
            PromptKind::Rec | PromptKind::Reason => self.sample_action(&lp, rng),
            PromptKind::Pattern | PromptKind::Update => self.greedy_action(&lp),
        };
        self.instantiate(a, kind, ctx)
    }
}

/// Inference-only backend over a remote chat-completion service.
pub struct RemoteBackend<T: Transport> {
    pub client: RemoteClient<T>,
    pub templates: PromptTemplates,
    pub decoding: DecodingParams,
}

impl<T: Transport> GeneratorBackend for RemoteBackend<T> {
    fn capabilities(&self) -> Capabilities {
        Capabilities { can_sample_group: true, can_report_logprob: false, trainable: false }
    }

    fn generate(&self, kind: PromptKind, ctx: &PromptContext<'_>, _rng: &mut dyn RngCore) -> Result<String> {
        let prompt = self.templates.render(kind, ctx)?;
        Ok(self.client.remote_generate(&prompt, &self.decoding)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub timestamp: i64,
    pub kind: PromptKind,
    pub user: Option<String>,
    pub item: Option<String>,
    pub raw: String,
}

/// Append-only JSON-lines log of every generation.
pub struct GenerationLog {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl GenerationLog {
    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self { path: path.to_path_buf(), out: std::io::BufWriter::new(f) })
    }

    pub fn append(&mut self, rec: &GenerationRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}").at(&self.path)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().at(&self.path)
    }
}
