//! Chat-completion client for an OpenAI-compatible service.
//!
//! Request (`POST {url}/chat/completions`):
//! `{"model": M, "messages": [{"role": "user", "content": PROMPT}], "temperature": T, "top_p": P, "max_tokens": N}`
//!
//! Response: the first `choices[0].message.content` string is returned verbatim.
//! Embeddings use `POST {url}/embeddings` with `{"model": M, "input": TEXT}` and
//! read `data[0].embedding`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const ENV_URL: &str = "REASONREC_LLM_URL";
pub const ENV_MODEL: &str = "REASONREC_LLM_MODEL";
pub const ENV_TOKEN: &str = "REASONREC_LLM_TOKEN";
pub const ENV_EMBED_MODEL: &str = "REASONREC_EMBED_MODEL";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited or over quota (HTTP {0})")]
    Quota(u16),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::Quota(_) | TransportError::Connection(_) => true,
            TransportError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, token: &str, body: &Value) -> Result<Value, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        Self { agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, token: &str, body: &Value) -> Result<Value, TransportError> {
        let resp = self
            .agent
            .post(url)
            .set("Authorization", &format!("Bearer {token}"))
            .set("Content-Type", "application/json")
            .send_json(body.clone());
        match resp {
            Ok(r) => r.into_json().map_err(|e| TransportError::BadResponse(e.to_string())),
            Err(ureq::Error::Status(429, _)) => Err(TransportError::Quota(429)),
            Err(ureq::Error::Status(code, r)) => {
                Err(TransportError::Status { status: code, body: r.into_string().unwrap_or_default() })
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") {
                    Err(TransportError::Timeout)
                } else {
                    Err(TransportError::Connection(msg))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub token: String,
    pub embed_model: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub redact_prompts: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            token: String::new(),
            embed_model: String::new(),
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            redact_prompts: false,
        }
    }
}

impl EndpointConfig {
    pub fn from_env() -> Result<Self, TransportError> {
        let get = |k: &'static str| std::env::var(k).map_err(|_| TransportError::MissingEnv(k));
        Ok(Self {
            url: get(ENV_URL)?,
            model: get(ENV_MODEL)?,
            token: get(ENV_TOKEN)?,
            embed_model: std::env::var(ENV_EMBED_MODEL).unwrap_or_default(),
            ..Self::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self { temperature: 0.7, top_p: 0.95, max_tokens: 512 }
    }
}

pub struct RemoteClient<T: Transport> {
    cfg: EndpointConfig,
    transport: T,
    sleep: Box<dyn Fn(Duration) + Send + Sync>,
}

impl RemoteClient<UreqTransport> {
    pub fn connect(cfg: EndpointConfig) -> Self {
        let t = UreqTransport::new(Duration::from_secs(cfg.timeout_secs));
        Self::with_transport(cfg, t)
    }
}

impl<T: Transport> RemoteClient<T> {
    pub fn with_transport(cfg: EndpointConfig, transport: T) -> Self {
        Self { cfg, transport, sleep: Box::new(std::thread::sleep) }
    }

    /// Replaces the backoff sleep, mainly so tests run instantly.
    pub fn with_sleep(mut self, f: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(f);
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.url.trim_end_matches('/'), path)
    }

    fn post_with_retry(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        let mut attempt = 0;
        loop {
            match self.transport.post_json(url, &self.cfg.token, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    let wait = Duration::from_millis(self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16)));
                    tracing::warn!(error = %e, attempt = attempt + 1, ?wait, "retrying request");
                    (self.sleep)(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Returns the completion text verbatim.
    pub fn remote_generate(&self, prompt: &str, params: &DecodingParams) -> Result<String, TransportError> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        if self.cfg.redact_prompts {
            tracing::debug!(model = %self.cfg.model, chars = prompt.len(), "chat request (prompt redacted)");
        } else {
            tracing::debug!(model = %self.cfg.model, prompt, "chat request");
        }
        let resp = self.post_with_retry(&self.endpoint("chat/completions"), &body)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| TransportError::BadResponse("missing choices[0].message.content".into()))?;
        tracing::debug!(chars = text.len(), "chat response");
        Ok(text.to_string())
    }

    pub fn remote_embed(&self, text: &str) -> Result<Vec<f64>, TransportError> {
        let body = json!({ "model": self.cfg.embed_model, "input": text });
        let resp = self.post_with_retry(&self.endpoint("embeddings"), &body)?;
        resp.pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| TransportError::BadResponse("missing data[0].embedding".into()))
    }
}

/// Test double that replays a scripted sequence of results.
pub struct MockTransport {
    script: std::sync::Mutex<std::collections::VecDeque<Result<Value, TransportError>>>,
    fallback: Result<Value, TransportError>,
    calls: std::sync::atomic::AtomicUsize,
}

impl MockTransport {
    pub fn new(script: Vec<Result<Value, TransportError>>, fallback: Result<Value, TransportError>) -> Self {
        Self { script: std::sync::Mutex::new(script.into()), fallback, calls: Default::default() }
    }

    /// Always answers with one chat completion.
    pub fn echo(content: &str) -> Self {
        Self::new(vec![], Ok(chat_response(content)))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

pub fn chat_response(content: &str) -> Value {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]})
}

impl Transport for MockTransport {
    fn post_json(&self, _url: &str, _token: &str, _body: &Value) -> Result<Value, TransportError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let next = self.script.lock().expect("mock lock").pop_front();
        next.unwrap_or_else(|| self.fallback.clone())
    }
}

impl<T: Transport> Transport for std::sync::Arc<T> {
    fn post_json(&self, url: &str, token: &str, body: &Value) -> Result<Value, TransportError> {
        (**self).post_json(url, token, body)
    }
}
