//! Chat-completion port.
//!
//! Three implementations sit behind [`LlmPort`]:
//! - [`ReplayLlm`] answers from a recorded transcript and never touches the
//!   network. Entries are keyed by a SHA-256 of the full message list, so a
//!   changed prompt fails loudly instead of silently drifting.
//! - [`HttpLlm`] talks to an OpenAI-compatible `/chat/completions` endpoint.
//! - [`RecordingLlm`] wraps another port and captures a replayable transcript.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("provider error {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("replay transcript exhausted (no entry for request {key})")]
    ReplayExhausted { key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider not configured: {0}")]
    NotConfigured(String),
    #[error("transcript error: {0}")]
    Transcript(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("at least one message is required".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Stable hex SHA-256 over roles and contents of the message list.
    pub fn key(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(m.role.as_str().as_bytes());
            hasher.update([0u8]);
            hasher.update(m.content.as_bytes());
            hasher.update([0x1e]);
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn prompt_bytes(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl std::ops::Add for Usage {
    type Output = Usage;
    fn add(self, rhs: Usage) -> Usage {
        Usage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
        }
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), |a, b| a + b)
    }
}

/// Lock-free running total of token usage.
#[derive(Debug, Default)]
pub struct UsageMeter {
    input: AtomicU64,
    output: AtomicU64,
}

impl UsageMeter {
    pub fn record(&self, usage: Usage) {
        self.input.fetch_add(usage.input_tokens, Ordering::Relaxed);
        self.output.fetch_add(usage.output_tokens, Ordering::Relaxed);
    }

    pub fn total(&self) -> Usage {
        Usage {
            input_tokens: self.input.load(Ordering::Relaxed),
            output_tokens: self.output.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

/// Reporting-only token estimate: `ceil(utf8_bytes / 4)`.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

pub trait LlmPort: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError>;

    /// Usage accumulated over every successful call on this port.
    fn total_usage(&self) -> Usage;
}

impl<T: LlmPort + ?Sized> LlmPort for std::sync::Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        (**self).complete(req)
    }

    fn total_usage(&self) -> Usage {
        (**self).total_usage()
    }
}

/// Borrowing wrapper that counts the calls and usage made through it, so a
/// caller can attribute spend to one unit of work on a shared port.
pub struct Metered<'a> {
    inner: &'a dyn LlmPort,
    meter: UsageMeter,
    calls: AtomicU64,
}

impl<'a> Metered<'a> {
    pub fn new(inner: &'a dyn LlmPort) -> Self {
        Self {
            inner,
            meter: UsageMeter::default(),
            calls: AtomicU64::new(0),
        }
    }

    /// Successful calls so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LlmPort for Metered<'_> {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        let c = self.inner.complete(req)?;
        self.meter.record(c.usage);
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(c)
    }

    fn total_usage(&self) -> Usage {
        self.meter.total()
    }
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// One recorded response. Entries without a key are served in order to
/// requests that match no keyed entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl TranscriptEntry {
    pub fn scripted(response: impl Into<String>) -> Self {
        Self {
            key: None,
            response: response.into(),
            usage: None,
        }
    }

    pub fn keyed(key: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            key: Some(key.into()),
            response: response.into(),
            usage: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn scripted<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            entries: responses.into_iter().map(TranscriptEntry::scripted).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LlmError::Transcript(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Default)]
struct ReplayState {
    keyed: HashMap<String, VecDeque<TranscriptEntry>>,
    scripted: VecDeque<TranscriptEntry>,
}

#[derive(Debug)]
pub struct ReplayLlm {
    state: Mutex<ReplayState>,
    meter: UsageMeter,
}

impl ReplayLlm {
    pub fn new(transcript: Transcript) -> Self {
        let mut state = ReplayState::default();
        for entry in transcript.entries {
            match entry.key.clone() {
                Some(key) => state.keyed.entry(key).or_default().push_back(entry),
                None => state.scripted.push_back(entry),
            }
        }
        Self {
            state: Mutex::new(state),
            meter: UsageMeter::default(),
        }
    }

    pub fn scripted<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(Transcript::scripted(responses))
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(Transcript::load(path)?))
    }

    /// Entries not yet served.
    pub fn remaining(&self) -> usize {
        let state = self.state.lock().expect("replay state poisoned");
        state.scripted.len() + state.keyed.values().map(VecDeque::len).sum::<usize>()
    }
}

impl LlmPort for ReplayLlm {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        req.validate()?;
        let key = req.key();
        let entry = {
            let mut state = self.state.lock().expect("replay state poisoned");
            let keyed = state.keyed.get_mut(&key).and_then(VecDeque::pop_front);
            match keyed {
                Some(entry) => Some(entry),
                None => state.scripted.pop_front(),
            }
        };
        let entry = entry.ok_or(LlmError::ReplayExhausted { key })?;
        let usage = entry.usage.unwrap_or(Usage {
            input_tokens: estimate_tokens(&req.prompt_bytes()),
            output_tokens: estimate_tokens(&entry.response),
        });
        self.meter.record(usage);
        Ok(Completion {
            text: entry.response,
            usage,
        })
    }

    fn total_usage(&self) -> Usage {
        self.meter.total()
    }
}

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

/// Wraps a port and keeps a keyed transcript of every successful call.
pub struct RecordingLlm<L> {
    inner: L,
    recorded: Mutex<Vec<TranscriptEntry>>,
}

impl<L: LlmPort> RecordingLlm<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            entries: self.recorded.lock().expect("recording poisoned").clone(),
        }
    }
}

impl<L: LlmPort> LlmPort for RecordingLlm<L> {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        let completion = self.inner.complete(req)?;
        self.recorded.lock().expect("recording poisoned").push(TranscriptEntry {
            key: Some(req.key()),
            response: completion.text.clone(),
            usage: Some(completion.usage),
        });
        Ok(completion)
    }

    fn total_usage(&self) -> Usage {
        self.inner.total_usage()
    }
}

// ---------------------------------------------------------------------------
// Live provider
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProviderConfig {
    pub api_key: String,
    pub base_url: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl ProviderConfig {
    pub const ENV_API_KEY: &'static str = "DATAFACTORY_API_KEY";
    pub const ENV_BASE_URL: &'static str = "DATAFACTORY_BASE_URL";
    pub const ENV_MODEL: &'static str = "DATAFACTORY_MODEL";

    pub fn from_env() -> Result<Self, LlmError> {
        let api_key = std::env::var(Self::ENV_API_KEY)
            .map_err(|_| LlmError::NotConfigured(format!("{} is not set", Self::ENV_API_KEY)))?;
        let base_url = std::env::var(Self::ENV_BASE_URL).unwrap_or_else(|_| "https://api.openai.com/v1".to_string());
        let model = std::env::var(Self::ENV_MODEL)
            .map_err(|_| LlmError::NotConfigured(format!("{} is not set", Self::ENV_MODEL)))?;
        Ok(Self::new(api_key, base_url, model))
    }

    pub fn new(api_key: String, base_url: String, model: String) -> Self {
        Self {
            api_key,
            base_url,
            model,
            timeout: Duration::from_secs(120),
            max_retries: 2,
            backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// OpenAI-compatible chat-completions client.
pub struct HttpLlm {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
    meter: UsageMeter,
}

enum Attempt {
    Done(Completion),
    Retry(LlmError),
    Fail(LlmError),
}

impl HttpLlm {
    pub fn new(config: ProviderConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            client,
            meter: UsageMeter::default(),
        })
    }

    pub fn from_env() -> Result<Self, LlmError> {
        Self::new(ProviderConfig::from_env()?)
    }

    fn attempt(&self, req: &ChatRequest) -> Attempt {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = WireRequest {
            model: &self.config.model,
            messages: &req.messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let response = match self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
        {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(LlmError::Timeout),
            Err(e) => return Attempt::Retry(LlmError::Transport(e.to_string())),
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(LlmError::Timeout),
            Err(e) => return Attempt::Retry(LlmError::Transport(e.to_string())),
        };
        if !status.is_success() {
            let err = LlmError::Provider {
                status: status.as_u16(),
                body: text,
            };
            return if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => {
                return Attempt::Fail(LlmError::Provider {
                    status: status.as_u16(),
                    body: format!("unparseable response ({e}): {text}"),
                })
            }
        };
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let usage = match parsed.usage {
            Some(u) => Usage {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
            },
            None => Usage {
                input_tokens: estimate_tokens(&req.prompt_bytes()),
                output_tokens: estimate_tokens(&content),
            },
        };
        Attempt::Done(Completion { text: content, usage })
    }
}

impl LlmPort for HttpLlm {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, LlmError> {
        req.validate()?;
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(req) {
                Attempt::Done(completion) => {
                    self.meter.record(completion.usage);
                    return Ok(completion);
                }
                Attempt::Fail(err) => return Err(err),
                Attempt::Retry(err) => {
                    if attempt >= self.config.max_retries {
                        return Err(err);
                    }
                    tracing::warn!(attempt, error = %err, "retrying chat completion");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn total_usage(&self) -> Usage {
        self.meter.total()
    }
}

/// Pulls the body of the first fenced code block, preferring one tagged with
/// `lang`. Falls back to the trimmed text when no fence is present.
pub fn extract_fenced(text: &str, lang: &str) -> String {
    let blocks = fenced_blocks(text);
    if let Some((_, body)) = blocks.iter().find(|(tag, _)| tag.eq_ignore_ascii_case(lang)) {
        return body.trim().to_string();
    }
    if let Some((_, body)) = blocks.first() {
        return body.trim().to_string();
    }
    text.trim().to_string()
}

fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let line_end = after.find('\n').unwrap_or(after.len());
        let tag = after[..line_end].trim().to_string();
        let body_start = (line_end + 1).min(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                blocks.push((tag, body[..end].to_string()));
                rest = &body[end + 3..];
            }
            None => {
                blocks.push((tag, body.to_string()));
                break;
            }
        }
    }
    blocks
}
