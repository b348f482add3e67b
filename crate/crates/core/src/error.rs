use std::path::PathBuf;

use crate::ndkernel::KernelError;
use crate::textgen::TransportError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {malformed} of {total} lines malformed (lines {lines:?})", path.display())]
    Ingest { path: PathBuf, malformed: usize, total: usize, lines: Vec<usize> },
    #[error("{}:{line}: {detail}", path.display())]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("cannot sample {count} negatives from {available} eligible items")]
    InfeasibleSample { count: usize, available: usize },
    #[error("{kind} prompt is missing slot `{slot}`")]
    MissingSlot { kind: &'static str, slot: &'static str },
    #[error("malformed generator output: {0}")]
    MalformedOutput(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown {kind} `{id}`")]
    Unknown { kind: &'static str, id: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("missing {what} ({}); run `{command}` first", path.display())]
    Prerequisite { command: &'static str, what: &'static str, path: PathBuf },
    #[error("store: {0}")]
    Store(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
