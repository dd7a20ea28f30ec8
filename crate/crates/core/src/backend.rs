//! Completion backends: a live chat-completions client, a scripted backend
//! for tests, and a cassette wrapper that records or replays exchanges.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const GENERATION_TEMPERATURE: f64 = 0.7;
pub const VERIFICATION_TEMPERATURE: f64 = 0.0;
pub const MAX_RETRIES: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Caller tag folded into the cassette digest so concurrent sessions
    /// with identical prompts stay distinguishable. Never sent over HTTP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

impl CompletionRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: GENERATION_TEMPERATURE,
            max_tokens: 256,
            stop_sequences: Vec::new(),
            session: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn session(mut self, tag: Option<String>) -> Self {
        self.session = tag;
        self
    }

    fn check(&self) -> Result<(), BackendError> {
        if self.user_text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("user_text is empty".into()));
        }
        if !(self.temperature >= 0.0) || self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0 and max_tokens > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub token_usage: Option<TokenUsage>,
    pub latency: Duration,
}

impl CompletionResult {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), token_usage: None, latency: Duration::ZERO }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned {status}: {body}")]
    EndpointError { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<BackendError> },
    #[error("response body could not be decoded: {0}")]
    Decode(String),
    #[error("scripted backend has no responses left")]
    ScriptExhausted,
    #[error("no recorded response for request digest {0}")]
    CassetteMiss(String),
    #[error("cassette i/o: {0}")]
    CassetteIo(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Network failures, timeouts, 429 and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::EndpointError { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that turns a prompt into model text.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Default)]
struct ScriptState {
    responses: VecDeque<String>,
    transcript: Vec<CompletionRequest>,
}

/// Serves a fixed list of responses in order and records every request.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            state: Mutex::new(ScriptState {
                responses: responses.into_iter().map(Into::into).collect(),
                transcript: Vec::new(),
            }),
        }
    }

    /// One response per line; `\n` inside a line is unescaped.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(text.lines().map(|l| l.replace("\\n", "\n"))))
    }

    pub fn push(&self, response: impl Into<String>) {
        self.state.lock().unwrap().responses.push_back(response.into());
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().transcript.len()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().responses.len()
    }

    pub fn transcript(&self) -> Vec<CompletionRequest> {
        self.state.lock().unwrap().transcript.clone()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.check()?;
        let mut state = self.state.lock().unwrap();
        state.transcript.push(request.clone());
        let text = state.responses.pop_front().ok_or(BackendError::ScriptExhausted)?;
        Ok(CompletionResult::text(text))
    }
}

/// Answers each request with a pure function of the request.
pub struct FnBackend<F> {
    respond: F,
    calls: AtomicUsize,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> String + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        Self { respond, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> String + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.check()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(CompletionResult::text((self.respond)(request)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 60.0,
            retries: 3,
            backoff_base_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0) {
            return Err(BackendError::Config("timeout_secs must be > 0".into()));
        }
        if self.retries > MAX_RETRIES {
            return Err(BackendError::Config(format!("retries must be <= {MAX_RETRIES}")));
        }
        Ok(())
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

/// Blocking client for an OpenAI-compatible chat-completions endpoint.
pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    url: String,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => None,
            },
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
        Ok(Self { config, api_key, agent, url })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.system_text}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user_text}));
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = serde_json::json!(request.stop_sequences);
        }
        body
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req.send_json(self.body(request)).map_err(map_ureq_error)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(map_ureq_error)?;
        if !(200..300).contains(&status) {
            let body: String = text.chars().take(200).collect();
            return Err(BackendError::EndpointError { status, body });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Decode("response has no choices".into()))?;
        Ok(CompletionResult {
            text: choice.message.content.unwrap_or_default(),
            token_usage: parsed.usage.map(|u| TokenUsage { prompt: u.prompt_tokens, completion: u.completion_tokens }),
            latency: started.elapsed(),
        })
    }
}

fn map_ureq_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::StatusCode(status) => BackendError::EndpointError { status, body: String::new() },
        other => BackendError::Transport(other.to_string()),
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u32,
    completion_tokens: u32,
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.check()?;
        let attempts = self.config.retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(request) {
                Ok(result) => return Ok(result),
                Err(e) if !e.is_transient() => return Err(e),
                Err(e) if attempt >= attempts => {
                    if attempts == 1 {
                        return Err(e);
                    }
                    return Err(BackendError::RetriesExhausted { attempts, last: Box::new(e) });
                }
                Err(_) => std::thread::sleep(self.config.backoff(attempt - 1)),
            }
        }
    }
}

/// Stable digest of a request: SHA-256 over its canonical JSON encoding.
pub fn request_digest(request: &CompletionRequest) -> String {
    let bytes = serde_json::to_vec(request).expect("request serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CassetteEntry {
    digest: String,
    request: CompletionRequest,
    response: String,
}

enum CassetteMode {
    Record { inner: Arc<dyn CompletionBackend>, file: Mutex<File> },
    Replay { entries: Mutex<HashMap<String, VecDeque<String>>> },
}

/// Record mode forwards to an inner backend and appends every exchange to a
/// line-delimited cassette; replay mode serves responses by request digest,
/// in recorded order per digest, and never touches the network.
pub struct CassetteBackend {
    mode: CassetteMode,
    path: PathBuf,
}

impl CassetteBackend {
    pub fn record(inner: Arc<dyn CompletionBackend>, path: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::CassetteIo(format!("{}: {e}", path.display())))?;
        Ok(Self { mode: CassetteMode::Record { inner, file: Mutex::new(file) }, path: path.to_path_buf() })
    }

    pub fn replay(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path).map_err(|e| BackendError::CassetteIo(format!("{}: {e}", path.display())))?;
        let mut entries: HashMap<String, VecDeque<String>> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::CassetteIo(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| BackendError::CassetteIo(format!("line {}: {e}", i + 1)))?;
            entries.entry(entry.digest).or_default().push_back(entry.response);
        }
        Ok(Self { mode: CassetteMode::Replay { entries: Mutex::new(entries) }, path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl CompletionBackend for CassetteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let digest = request_digest(request);
        match &self.mode {
            CassetteMode::Record { inner, file } => {
                let result = inner.complete(request)?;
                let entry = CassetteEntry { digest, request: request.clone(), response: result.text.clone() };
                let mut line = serde_json::to_string(&entry).expect("entry serializes");
                line.push('\n');
                let mut f = file.lock().unwrap();
                f.write_all(line.as_bytes())
                    .and_then(|_| f.flush())
                    .map_err(|e| BackendError::CassetteIo(e.to_string()))?;
                Ok(result)
            }
            CassetteMode::Replay { entries } => {
                let mut entries = entries.lock().unwrap();
                let text = entries
                    .get_mut(&digest)
                    .and_then(VecDeque::pop_front)
                    .ok_or(BackendError::CassetteMiss(digest))?;
                Ok(CompletionResult::text(text))
            }
        }
    }
}
