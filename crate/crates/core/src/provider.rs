//! Chat-completion providers: an OpenAI-compatible HTTP client, a scripted
//! mock for offline runs, and a retry wrapper.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Phase;

pub const ENV_PROVIDER_URL: &str = "VCHATTER_PROVIDER_URL";
pub const ENV_PROVIDER_KEY: &str = "VCHATTER_PROVIDER_KEY";
pub const ENV_MODEL: &str = "VCHATTER_MODEL";
pub const ENV_MOCK_SCRIPT: &str = "VCHATTER_MOCK_SCRIPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model_id: "gpt-4".into(),
            temperature: 0.7,
            max_tokens: 1024,
            timeout: Duration::from_secs(60),
            seed: None,
        }
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Identifies one scripted reply: which agent speaks, on which day and
/// phase, and the index of the reply within that (agent, day, phase).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScriptKey {
    pub kind: String,
    pub day: u8,
    pub phase: Phase,
    pub turn: u32,
}

impl ScriptKey {
    pub fn therapist(day: u8, phase: Phase, turn: u32) -> Self {
        Self { kind: "therapist".into(), day, phase, turn }
    }
    pub fn interlocutor(slot: usize, day: u8, turn: u32) -> Self {
        Self { kind: format!("interlocutor{slot}"), day, phase: Phase::Exposure, turn }
    }
}

impl fmt::Display for ScriptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.kind, self.day, self.phase, self.turn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub params: CompletionParams,
    /// Routing key for scripted providers; remote providers ignore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<ScriptKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderError {
    #[error("provider timed out")]
    Timeout,
    #[error("provider rate limited")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("provider rejected credentials")]
    AuthFailed,
    #[error("invalid completion request: {0}")]
    Precondition(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

impl ProviderError {
    /// Errors worth retrying with backoff.
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Timeout | ProviderError::RateLimited { .. })
    }

    /// Whether the caller may usefully try the same request again later.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Timeout | ProviderError::RateLimited { .. } | ProviderError::Unavailable(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamChunk {
    Delta(String),
    Error(ProviderError),
}

pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), ProviderError> {
    match messages.first() {
        None => return Err(ProviderError::Precondition("no messages".into())),
        Some(m) if m.role != ChatRole::System => {
            return Err(ProviderError::Precondition("first message must be the system prompt".into()))
        }
        _ => {}
    }
    if !messages.iter().any(|m| m.role == ChatRole::User) {
        return Err(ProviderError::Precondition("no user message".into()));
    }
    if messages
        .iter()
        .any(|m| m.role != ChatRole::System && m.content.trim().is_empty())
    {
        return Err(ProviderError::Precondition("empty user or assistant message".into()));
    }
    Ok(())
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError>;

    /// Streams the reply through `sink`. The concatenated deltas equal the
    /// returned text. A failure after the first delta is also reported to the
    /// sink as a terminal `StreamChunk::Error`.
    fn complete_streaming(
        &self,
        req: &CompletionRequest,
        sink: &mut dyn FnMut(StreamChunk),
    ) -> Result<String, ProviderError> {
        let text = self.complete(req)?;
        sink(StreamChunk::Delta(text.clone()));
        Ok(text)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        (**self).complete(req)
    }
    fn complete_streaming(
        &self,
        req: &CompletionRequest,
        sink: &mut dyn FnMut(StreamChunk),
    ) -> Result<String, ProviderError> {
        (**self).complete_streaming(req, sink)
    }
}

// ---------------------------------------------------------------------------
// Script and mock

/// `"kind/day/phase/turn"` → reply text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProviderScript(pub BTreeMap<String, String>);

impl ProviderScript {
    pub fn from_json(text: &str) -> Result<Self, ProviderError> {
        serde_json::from_str(text).map_err(|e| ProviderError::MalformedResponse(format!("script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Unavailable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn get(&self, key: &ScriptKey) -> Option<&str> {
        self.0.get(&key.to_string()).map(String::as_str)
    }

    pub fn insert(&mut self, key: &ScriptKey, text: impl Into<String>) {
        self.0.insert(key.to_string(), text.into());
    }

    pub fn remove(&mut self, key: &ScriptKey) -> Option<String> {
        self.0.remove(&key.to_string())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Splitter {
    /// Three near-equal chunks (fewer for very short replies).
    Fixed3,
    /// Random cut points drawn from a generator seeded with the seed and key.
    Seeded(u64),
}

/// Splits `text` into non-empty chunks on char boundaries.
pub fn split_chunks(text: &str, splitter: Splitter, key: &str) -> Vec<String> {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).skip(1).collect();
    let mut cuts: Vec<usize> = match splitter {
        Splitter::Fixed3 => {
            let n = text.chars().count();
            if n == 0 {
                return Vec::new();
            }
            [n / 3, 2 * n / 3]
                .into_iter()
                .filter(|&c| c > 0)
                .map(|c| bounds[c - 1])
                .collect()
        }
        Splitter::Seeded(seed) => {
            if bounds.is_empty() {
                Vec::new()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key.as_bytes()));
                let k = rng.random_range(0..=bounds.len().min(8));
                (0..k).map(|_| bounds[rng.random_range(0..bounds.len())]).collect()
            }
        }
    };
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = Vec::new();
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(text.len())) {
        if c > start {
            out.push(text[start..c].to_string());
            start = c;
        }
    }
    out
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// Fail before any output.
    Before(ProviderError),
    /// Emit the first chunk, then fail.
    MidStream(ProviderError),
}

/// Deterministic scripted provider.
pub struct MockProvider {
    script: ProviderScript,
    strict: bool,
    splitter: Splitter,
    faults: Mutex<VecDeque<Fault>>,
    calls: Mutex<Vec<CompletionRequest>>,
}

impl MockProvider {
    pub fn new(script: ProviderScript) -> Self {
        Self {
            script,
            strict: true,
            splitter: Splitter::Fixed3,
            faults: Mutex::new(VecDeque::new()),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Non-strict mocks answer unscripted keys with a placeholder line.
    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn with_splitter(mut self, splitter: Splitter) -> Self {
        self.splitter = splitter;
        self
    }

    /// Queues a fault for the next call.
    pub fn inject(&self, fault: Fault) {
        self.faults.lock().push_back(fault);
    }

    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.calls.lock().clone()
    }

    fn lookup(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        validate_messages(&req.messages)?;
        let key = req
            .key
            .as_ref()
            .ok_or_else(|| ProviderError::MalformedResponse("request has no script key".into()))?;
        match self.script.get(key) {
            Some(text) => Ok(text.to_string()),
            None if self.strict => Err(ProviderError::MalformedResponse(format!(
                "no scripted reply for key {key}"
            ))),
            None => Ok(format!("[unscripted reply for {key}]")),
        }
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        let mut chunks = Vec::new();
        self.complete_streaming(req, &mut |c| chunks.push(c))
    }

    fn complete_streaming(
        &self,
        req: &CompletionRequest,
        sink: &mut dyn FnMut(StreamChunk),
    ) -> Result<String, ProviderError> {
        self.calls.lock().push(req.clone());
        let fault = self.faults.lock().pop_front();
        if let Some(Fault::Before(e)) = fault {
            return Err(e);
        }
        let text = self.lookup(req)?;
        let key = req.key.as_ref().map(ToString::to_string).unwrap_or_default();
        let chunks = split_chunks(&text, self.splitter, &key);
        if chunks.is_empty() {
            return Err(ProviderError::MalformedResponse(format!("empty reply for key {key}")));
        }
        if let Some(Fault::MidStream(e)) = fault {
            sink(StreamChunk::Delta(chunks[0].clone()));
            sink(StreamChunk::Error(e.clone()));
            return Err(e);
        }
        for c in chunks {
            sink(StreamChunk::Delta(c));
        }
        Ok(text)
    }
}

// ---------------------------------------------------------------------------
// Retry

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub sleeper: Sleeper,
}

impl fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("max_retries", &self.max_retries)
            .field("base_delay", &self.base_delay)
            .finish()
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            sleeper: Arc::new(std::thread::sleep),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, ..Self::default() }
    }

    /// Delay before retry number `attempt` (0-based): base × 2^attempt, or
    /// the server's retry-after hint when it is longer.
    pub fn delay(&self, attempt: u32, err: &ProviderError) -> Duration {
        let backoff = self.base_delay * 2u32.saturating_pow(attempt);
        match err {
            ProviderError::RateLimited { retry_after_ms: Some(ms) } => backoff.max(Duration::from_millis(*ms)),
            _ => backoff,
        }
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    let d = self.delay(attempt, &e);
                    tracing::warn!(error = %e, attempt, delay_ms = d.as_millis() as u64, "retrying provider call");
                    (self.sleeper)(d);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Wraps a provider with a retry policy. Streaming calls are only retried
/// when the failure happened before any chunk reached the sink.
pub struct Retrying<P> {
    pub inner: P,
    pub policy: RetryPolicy,
}

impl<P: ChatProvider> ChatProvider for Retrying<P> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        self.policy.run(|| self.inner.complete(req))
    }

    fn complete_streaming(
        &self,
        req: &CompletionRequest,
        sink: &mut dyn FnMut(StreamChunk),
    ) -> Result<String, ProviderError> {
        let mut emitted = false;
        self.policy.run(|| {
            if emitted {
                return Err(ProviderError::Unavailable("stream interrupted".into()));
            }
            self.inner.complete_streaming(req, &mut |c| {
                if matches!(c, StreamChunk::Delta(_)) {
                    emitted = true;
                }
                sink(c)
            })
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP

/// OpenAI-compatible chat-completion client.
pub struct HttpProvider {
    endpoint: String,
    api_key: Option<String>,
    default_model: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    stream: bool,
}

impl HttpProvider {
    /// `url` may be a base URL or the full `/chat/completions` endpoint.
    pub fn new(url: &str, api_key: Option<String>, default_model: impl Into<String>) -> Self {
        let url = url.trim_end_matches('/');
        let endpoint = if url.ends_with("/chat/completions") {
            url.to_string()
        } else {
            format!("{url}/chat/completions")
        };
        Self {
            endpoint,
            api_key,
            default_model: default_model.into(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn send(&self, req: &CompletionRequest, stream: bool) -> Result<reqwest::blocking::Response, ProviderError> {
        validate_messages(&req.messages)?;
        let model = if req.params.model_id.is_empty() {
            &self.default_model
        } else {
            &req.params.model_id
        };
        let body = WireRequest {
            model,
            messages: &req.messages,
            temperature: req.params.temperature,
            max_tokens: req.params.max_tokens,
            seed: req.params.seed,
            stream,
        };
        let mut rb = self.client.post(&self.endpoint).timeout(req.params.timeout).json(&body);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb.send().map_err(map_transport)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => Ok(resp),
            401 | 403 => Err(ProviderError::AuthFailed),
            429 => {
                let retry_after_ms = resp
                    .headers()
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .map(|s| (s * 1000.0) as u64);
                Err(ProviderError::RateLimited { retry_after_ms })
            }
            408 | 504 => Err(ProviderError::Timeout),
            _ => Err(ProviderError::Unavailable(format!("HTTP {status}"))),
        }
    }
}

fn map_transport(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout
    } else if e.is_decode() || e.is_body() {
        ProviderError::MalformedResponse(e.to_string())
    } else {
        ProviderError::Unavailable(e.to_string())
    }
}

fn nonempty(text: String) -> Result<String, ProviderError> {
    if text.is_empty() {
        Err(ProviderError::MalformedResponse("empty completion".into()))
    } else {
        Ok(text)
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        let resp = self.send(req, false)?;
        let v: serde_json::Value = resp.json().map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| ProviderError::MalformedResponse("missing choices[0].message.content".into()))?;
        nonempty(text.to_string())
    }

    fn complete_streaming(
        &self,
        req: &CompletionRequest,
        sink: &mut dyn FnMut(StreamChunk),
    ) -> Result<String, ProviderError> {
        let resp = self.send(req, true)?;
        let mut text = String::new();
        let fail = |e: ProviderError, text: &str, sink: &mut dyn FnMut(StreamChunk)| {
            if !text.is_empty() {
                sink(StreamChunk::Error(e.clone()));
            }
            Err(e)
        };
        for line in BufReader::new(resp).lines() {
            let line = match line {
                Ok(l) => l,
                Err(e) => return fail(ProviderError::Unavailable(e.to_string()), &text, sink),
            };
            let Some(data) = line.strip_prefix("data:") else { continue };
            let data = data.trim();
            if data == "[DONE]" {
                break;
            }
            let v: serde_json::Value = match serde_json::from_str(data) {
                Ok(v) => v,
                Err(e) => return fail(ProviderError::MalformedResponse(e.to_string()), &text, sink),
            };
            if let Some(delta) = v.pointer("/choices/0/delta/content").and_then(|c| c.as_str()) {
                if !delta.is_empty() {
                    text.push_str(delta);
                    sink(StreamChunk::Delta(delta.to_string()));
                }
            }
        }
        nonempty(text)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderConfig {
    Mock { script: PathBuf },
    Http { url: String, api_key: Option<String>, model: String },
}

impl ProviderConfig {
    /// A mock script path takes precedence over a provider URL.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ProviderError> {
        if let Some(p) = get(ENV_MOCK_SCRIPT).filter(|s| !s.is_empty()) {
            return Ok(ProviderConfig::Mock { script: p.into() });
        }
        let url = get(ENV_PROVIDER_URL)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ProviderError::Precondition(format!("set {ENV_PROVIDER_URL} or {ENV_MOCK_SCRIPT}")))?;
        Ok(ProviderConfig::Http {
            url,
            api_key: get(ENV_PROVIDER_KEY).filter(|s| !s.is_empty()),
            model: get(ENV_MODEL).unwrap_or_else(|| CompletionParams::default().model_id),
        })
    }

    pub fn from_env() -> Result<Self, ProviderError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn build(&self) -> Result<Arc<dyn ChatProvider>, ProviderError> {
        Ok(match self {
            ProviderConfig::Mock { script } => Arc::new(MockProvider::new(ProviderScript::load(script)?)),
            ProviderConfig::Http { url, api_key, model } => Arc::new(Retrying {
                inner: HttpProvider::new(url, api_key.clone(), model.clone()),
                policy: RetryPolicy::default(),
            }),
        })
    }
}
