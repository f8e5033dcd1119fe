//! Clients for external model-serving endpoints: captioning, VQA
//! classification, text/visual embedding, and zero-shot labeling.
//!
//! A [`Transport`] does the wire work (HTTP or deterministic mock); the
//! [`ModelClient`] wraps it with retries, rate limiting, usage accounting,
//! and client-side batching. Batch mode sends a whole chunk of inputs in a
//! single transport call; no-batch mode sends one item per call.

pub mod http;
pub mod mock;

use std::collections::VecDeque;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CesClass, ImageRecord};
use crate::embedding::{EmbeddingVector, Modality};

/// Default captioning instruction.
pub const CAPTION_INSTRUCTION: &str = "Describe the image. Keep your response short.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    Batch,
    NoBatch,
}

impl BatchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BatchMode::Batch => "batch",
            BatchMode::NoBatch => "no-batch",
        }
    }
}

impl std::str::FromStr for BatchMode {
    type Err = ClientError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(BatchMode::Batch),
            "no-batch" | "nobatch" | "no_batch" => Ok(BatchMode::NoBatch),
            other => Err(ClientError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Connection and policy settings for one serving endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub model_id: String,
    pub mode: BatchMode,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Transport calls allowed in any 60-second window; `None` = unlimited.
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    /// Upper bound on concurrently outstanding transport calls.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_batch_size() -> usize {
    50
}
fn default_timeout() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    5
}
fn default_max_in_flight() -> usize {
    1
}

impl EndpointConfig {
    pub fn mock(model_id: &str) -> Self {
        Self {
            name: "mock".to_string(),
            base_url: "mock://".to_string(),
            api_key_env: String::new(),
            model_id: model_id.to_string(),
            mode: BatchMode::NoBatch,
            batch_size: 1,
            timeout_secs: 60,
            max_retries: 5,
            requests_per_minute: None,
            max_in_flight: 1,
        }
    }

    pub fn with_mode(mut self, mode: BatchMode, batch_size: usize) -> Self {
        self.mode = mode;
        self.batch_size = batch_size;
        self
    }

    /// Chunk size actually used: 1 in no-batch mode.
    pub fn effective_batch_size(&self) -> usize {
        match self.mode {
            BatchMode::Batch => self.batch_size.max(1),
            BatchMode::NoBatch => 1,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.batch_size < 1 {
            return Err(ClientError::Config("batch_size must be >= 1".to_string()));
        }
        if self.max_in_flight < 1 {
            return Err(ClientError::Config("max_in_flight must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Backend-reported token counts plus the number of transport calls made.
/// Additive: a session's usage is the sum over its requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub request_count: u64,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
            request_count: 0,
        }
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
            request_count: self.request_count + rhs.request_count,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub item_id: String,
    pub text: String,
    pub model_id: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawModelResponse {
    pub item_id: String,
    pub text: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error {status}: {body_excerpt}")]
    Transport { status: u16, body_excerpt: String },
    #[error("rate limited; retry after {retry_after_secs}s")]
    RateLimited { retry_after_secs: u64 },
    #[error("backend returned an empty response for item {item_id}")]
    EmptyResponse { item_id: String },
    #[error("empty input")]
    EmptyInput,
    #[error("image source `{image_source}` unreadable: {reason}")]
    ImageUnreadable { image_source: String, reason: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("embedding dims mismatch: declared {declared}, got {got}")]
    DimensionMismatch { declared: usize, got: usize },
    #[error("run aborted after item failure: {0}")]
    AbortedRun(String),
    #[error("missing API key environment variable {0}")]
    MissingApiKey(String),
    #[error("client configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// One wire-level failure, before retry classification.
#[derive(Debug, Clone)]
pub enum TransportFault {
    /// Non-2xx HTTP status (or mock-scripted equivalent).
    Status {
        code: u16,
        body: String,
        retry_after_secs: Option<u64>,
    },
    Network(String),
}

impl TransportFault {
    fn retryable(&self) -> bool {
        match self {
            TransportFault::Status { code, .. } => *code == 429 || *code >= 500,
            TransportFault::Network(_) => true,
        }
    }

    fn into_client_error(self) -> ClientError {
        match self {
            TransportFault::Status {
                code: 429,
                retry_after_secs,
                ..
            } => ClientError::RateLimited {
                retry_after_secs: retry_after_secs.unwrap_or(0),
            },
            TransportFault::Status { code, body, .. } => ClientError::Transport {
                status: code,
                body_excerpt: body.chars().take(200).collect(),
            },
            TransportFault::Network(reason) => ClientError::BackendUnavailable(reason),
        }
    }
}

/// Image content as sent on the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum ImagePayload {
    /// Base64 data URL built from local file bytes.
    DataUrl(String),
    /// Pass-through http(s) URL.
    RemoteUrl(String),
    /// Mock reference; never leaves the process.
    Reference(String),
}

/// Resolve a record's source into a payload. Local paths are read and
/// base64-encoded here, so unreadable files fail before any transport.
pub fn load_image_payload(record: &ImageRecord) -> Result<ImagePayload, ClientError> {
    let source = record.source.as_str();
    if let Some(rest) = source.strip_prefix("mock://") {
        return Ok(ImagePayload::Reference(rest.to_string()));
    }
    if source.starts_with("http://") || source.starts_with("https://") {
        return Ok(ImagePayload::RemoteUrl(source.to_string()));
    }
    let bytes = std::fs::read(Path::new(source)).map_err(|e| ClientError::ImageUnreadable {
        image_source: source.to_string(),
        reason: e.to_string(),
    })?;
    if bytes.is_empty() {
        return Err(ClientError::ImageUnreadable {
            image_source: source.to_string(),
            reason: "empty file".to_string(),
        });
    }
    use base64::Engine as _;
    let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
    let mime = match Path::new(source).extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    Ok(ImagePayload::DataUrl(format!("data:{mime};base64,{encoded}")))
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub item_id: String,
    pub prompt: String,
    pub image: Option<ImagePayload>,
}

#[derive(Debug, Clone)]
pub struct ChatOutcome {
    pub text: String,
    pub usage: TokenUsage,
}

/// Per-item result inside a (possibly batched) transport call.
pub type ItemResult = Result<ChatOutcome, String>;

#[derive(Debug, Clone)]
pub enum EmbedInput {
    Text(String),
    Image(ImagePayload),
}

#[derive(Debug, Clone)]
pub struct EmbedRequest {
    pub item_id: String,
    pub modality: Modality,
    pub input: EmbedInput,
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub values: Vec<f64>,
    pub dims: usize,
    pub usage: TokenUsage,
}

/// Wire-level backend. One `chat` call is one transport call, whatever the
/// chunk size; implementations must be shareable across worker threads.
pub trait Transport: Send + Sync {
    fn chat(&self, requests: &[ChatRequest]) -> Result<Vec<ItemResult>, TransportFault>;
    fn embed(&self, request: &EmbedRequest) -> Result<EmbedOutcome, TransportFault>;
    /// Transport calls served so far (diagnostic; mock-backed tests assert on it).
    fn calls(&self) -> u64;
}

/// Injectable time source so retry/rate-limit behavior is testable without
/// real sleeping.
pub trait Clock: Send + Sync {
    fn now_millis(&self) -> u64;
    fn sleep_millis(&self, millis: u64);
}

pub struct SystemClock {
    origin: std::time::Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: std::time::Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now_millis(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn sleep_millis(&self, millis: u64) {
        std::thread::sleep(std::time::Duration::from_millis(millis));
    }
}

/// Virtual clock: `sleep` advances time instantly.
#[derive(Default)]
pub struct MockClock {
    now: Mutex<u64>,
}

impl MockClock {
    pub fn advance(&self, millis: u64) {
        *self.now.lock().unwrap() += millis;
    }
}

impl Clock for MockClock {
    fn now_millis(&self) -> u64 {
        *self.now.lock().unwrap()
    }

    fn sleep_millis(&self, millis: u64) {
        self.advance(millis);
    }
}

/// Sliding-window limiter: at most `limit` acquisitions per 60 seconds.
pub struct RateLimiter {
    limit: Option<u32>,
    window: Mutex<VecDeque<u64>>,
}

const WINDOW_MILLIS: u64 = 60_000;

impl RateLimiter {
    pub fn new(limit: Option<u32>) -> Self {
        Self {
            limit,
            window: Mutex::new(VecDeque::new()),
        }
    }

    pub fn acquire(&self, clock: &dyn Clock) {
        let Some(limit) = self.limit else { return };
        loop {
            let wait = {
                let mut window = self.window.lock().unwrap();
                let now = clock.now_millis();
                while let Some(front) = window.front() {
                    if now.saturating_sub(*front) >= WINDOW_MILLIS {
                        window.pop_front();
                    } else {
                        break;
                    }
                }
                if (window.len() as u32) < limit {
                    window.push_back(now);
                    None
                } else {
                    let oldest = *window.front().unwrap();
                    Some(oldest + WINDOW_MILLIS - now)
                }
            };
            match wait {
                None => return,
                Some(millis) => clock.sleep_millis(millis.max(1)),
            }
        }
    }
}

/// A transport wrapped with retry, rate-limiting, and audit policy.
pub struct ModelClient {
    pub config: EndpointConfig,
    transport: Arc<dyn Transport>,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
    jitter_seed: Mutex<u64>,
    audit: Option<Arc<Mutex<Box<dyn std::io::Write + Send>>>>,
}

impl ModelClient {
    pub fn new(config: EndpointConfig, transport: Arc<dyn Transport>) -> Self {
        let limiter = RateLimiter::new(config.requests_per_minute);
        Self {
            config,
            transport,
            limiter,
            clock: Arc::new(SystemClock::default()),
            jitter_seed: Mutex::new(0x5eed),
            audit: None,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_audit(mut self, sink: Box<dyn std::io::Write + Send>) -> Self {
        self.audit = Some(Arc::new(Mutex::new(sink)));
        self
    }

    pub fn transport_calls(&self) -> u64 {
        self.transport.calls()
    }

    fn next_jitter(&self, bound: u64) -> u64 {
        if bound == 0 {
            return 0;
        }
        let mut seed = self.jitter_seed.lock().unwrap();
        // xorshift64*; only the spread matters, not the quality.
        *seed ^= *seed << 13;
        *seed ^= *seed >> 7;
        *seed ^= *seed << 17;
        *seed % bound
    }

    fn backoff_millis(&self, attempt: u32, retry_after_secs: Option<u64>) -> u64 {
        let base = 500u64.saturating_mul(1 << attempt.min(10));
        let jittered = base + self.next_jitter(base / 2 + 1);
        match retry_after_secs {
            Some(secs) => jittered.max(secs * 1000),
            None => jittered,
        }
    }

    fn audit_line(&self, kind: &str, items: usize, attempt: u32, outcome: &str) {
        if let Some(sink) = &self.audit {
            let line = serde_json::json!({
                "endpoint": self.config.name,
                "model_id": self.config.model_id,
                "kind": kind,
                "items": items,
                "attempt": attempt,
                "outcome": outcome,
                "at_ms": self.clock.now_millis(),
            });
            let mut sink = sink.lock().unwrap();
            let _ = writeln!(sink, "{line}");
        }
    }

    /// Run one chunk through the transport with retries. Returns the item
    /// results and the number of transport calls spent.
    fn execute_chat(&self, chunk: &[ChatRequest]) -> Result<(Vec<ItemResult>, u64), ClientError> {
        let mut attempt = 0u32;
        loop {
            self.limiter.acquire(self.clock.as_ref());
            let result = self.transport.chat(chunk);
            match result {
                Ok(items) => {
                    self.audit_line("chat", chunk.len(), attempt, "ok");
                    if items.len() != chunk.len() {
                        return Err(ClientError::Protocol(format!(
                            "backend returned {} results for {} inputs",
                            items.len(),
                            chunk.len()
                        )));
                    }
                    return Ok((items, attempt as u64 + 1));
                }
                Err(fault) => {
                    self.audit_line("chat", chunk.len(), attempt, "fault");
                    if fault.retryable() && attempt < self.config.max_retries {
                        let retry_after = match &fault {
                            TransportFault::Status {
                                retry_after_secs, ..
                            } => *retry_after_secs,
                            _ => None,
                        };
                        self.clock
                            .sleep_millis(self.backoff_millis(attempt, retry_after));
                        attempt += 1;
                        continue;
                    }
                    return Err(fault.into_client_error());
                }
            }
        }
    }

    fn execute_embed(&self, request: &EmbedRequest) -> Result<(EmbedOutcome, u64), ClientError> {
        let mut attempt = 0u32;
        loop {
            self.limiter.acquire(self.clock.as_ref());
            match self.transport.embed(request) {
                Ok(outcome) => {
                    self.audit_line("embed", 1, attempt, "ok");
                    return Ok((outcome, attempt as u64 + 1));
                }
                Err(fault) => {
                    self.audit_line("embed", 1, attempt, "fault");
                    if fault.retryable() && attempt < self.config.max_retries {
                        let retry_after = match &fault {
                            TransportFault::Status {
                                retry_after_secs, ..
                            } => *retry_after_secs,
                            _ => None,
                        };
                        self.clock
                            .sleep_millis(self.backoff_millis(attempt, retry_after));
                        attempt += 1;
                        continue;
                    }
                    return Err(fault.into_client_error());
                }
            }
        }
    }
}

/// Caption one image. The backend's text comes back verbatim, trimmed;
/// an empty caption is an error.
pub fn caption_image(
    item: &ImageRecord,
    client: &ModelClient,
    instruction: &str,
) -> Result<Caption, ClientError> {
    let payload = load_image_payload(item)?;
    let request = ChatRequest {
        item_id: item.id.clone(),
        prompt: instruction.to_string(),
        image: Some(payload),
    };
    let (mut items, calls) = client.execute_chat(std::slice::from_ref(&request))?;
    let outcome = items
        .remove(0)
        .map_err(|reason| ClientError::Transport {
            status: 0,
            body_excerpt: reason,
        })?;
    let text = outcome.text.trim().to_string();
    if text.is_empty() {
        return Err(ClientError::EmptyResponse {
            item_id: item.id.clone(),
        });
    }
    let mut usage = outcome.usage;
    usage.request_count = calls;
    Ok(Caption {
        item_id: item.id.clone(),
        text,
        model_id: client.config.model_id.clone(),
        usage,
    })
}

/// Ask the backend to classify one image with an already-rendered prompt.
/// No class parsing happens here; the raw text is returned as-is.
pub fn classify_image_vqa(
    item: &ImageRecord,
    client: &ModelClient,
    prompt: &str,
) -> Result<RawModelResponse, ClientError> {
    let payload = load_image_payload(item)?;
    let request = ChatRequest {
        item_id: item.id.clone(),
        prompt: prompt.to_string(),
        image: Some(payload),
    };
    let started = client.clock.now_millis();
    let (mut items, calls) = client.execute_chat(std::slice::from_ref(&request))?;
    let outcome = items.remove(0).map_err(|reason| ClientError::Transport {
        status: 0,
        body_excerpt: reason,
    })?;
    if outcome.text.trim().is_empty() {
        return Err(ClientError::EmptyResponse {
            item_id: item.id.clone(),
        });
    }
    let mut usage = outcome.usage;
    usage.request_count = calls;
    Ok(RawModelResponse {
        item_id: item.id.clone(),
        text: outcome.text,
        usage,
        latency_ms: client.clock.now_millis() - started,
    })
}

/// Embed a non-empty text string.
pub fn embed_text(text: &str, client: &ModelClient) -> Result<EmbeddingVector, ClientError> {
    use sha2::Digest as _;
    if text.trim().is_empty() {
        return Err(ClientError::EmptyInput);
    }
    let request = EmbedRequest {
        item_id: format!("text:{}", hex::encode(&sha2::Sha256::digest(text.as_bytes())[..8])),
        modality: Modality::Text,
        input: EmbedInput::Text(text.to_string()),
    };
    finish_embed(client, request)
}

/// Embed one image record.
pub fn embed_image(item: &ImageRecord, client: &ModelClient) -> Result<EmbeddingVector, ClientError> {
    let payload = load_image_payload(item)?;
    let request = EmbedRequest {
        item_id: item.id.clone(),
        modality: Modality::Image,
        input: EmbedInput::Image(payload),
    };
    finish_embed(client, request)
}

fn finish_embed(client: &ModelClient, request: EmbedRequest) -> Result<EmbeddingVector, ClientError> {
    let (outcome, _) = client.execute_embed(&request)?;
    if outcome.values.len() != outcome.dims {
        return Err(ClientError::DimensionMismatch {
            declared: outcome.dims,
            got: outcome.values.len(),
        });
    }
    EmbeddingVector::new(
        request.item_id.clone(),
        request.modality,
        client.config.model_id.clone(),
        outcome.values,
    )
    .map_err(|e| ClientError::Protocol(e.to_string()))
}

/// Ask the backend to pick the best class for a piece of evidence text
/// (the rendered bag-of-words prompt). Always issues a real request, even
/// with a single candidate, so the audit trail is complete.
pub fn zero_shot_label(
    candidates: &[CesClass],
    evidence: &str,
    client: &ModelClient,
) -> Result<RawModelResponse, ClientError> {
    if candidates.is_empty() {
        return Err(ClientError::Config("candidate list is empty".to_string()));
    }
    if evidence.trim().is_empty() {
        return Err(ClientError::EmptyInput);
    }
    use sha2::Digest as _;
    let request = ChatRequest {
        item_id: format!("zeroshot:{}", hex::encode(&sha2::Sha256::digest(evidence.as_bytes())[..8])),
        prompt: evidence.to_string(),
        image: None,
    };
    let started = client.clock.now_millis();
    let (mut items, calls) = client.execute_chat(std::slice::from_ref(&request))?;
    let outcome = items.remove(0).map_err(|reason| ClientError::Transport {
        status: 0,
        body_excerpt: reason,
    })?;
    let mut usage = outcome.usage;
    usage.request_count = calls;
    Ok(RawModelResponse {
        item_id: request.item_id,
        text: outcome.text,
        usage,
        latency_ms: client.clock.now_millis() - started,
    })
}

/// One failed item inside a batched run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub reason: String,
}

/// Outcome of a batched run: per-item results in input order, aggregate
/// usage, and the number of transport calls spent.
#[derive(Debug)]
pub struct BatchedRun {
    pub results: Vec<Result<RawModelResponse, ItemFailure>>,
    pub usage: TokenUsage,
    pub transport_calls: u64,
}

impl BatchedRun {
    pub fn successes(&self) -> impl Iterator<Item = &RawModelResponse> {
        self.results.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &ItemFailure> {
        self.results.iter().filter_map(|r| r.as_ref().err())
    }
}

/// Send every request, chunked by the endpoint's effective batch size, with
/// at most `max_in_flight` chunks outstanding. Output order equals input
/// order and usage adds up exactly. With `fail_fast` false, item failures
/// become error records instead of aborting the run.
pub fn run_batched(
    requests: Vec<ChatRequest>,
    client: &ModelClient,
    fail_fast: bool,
) -> Result<BatchedRun, ClientError> {
    if requests.is_empty() {
        return Err(ClientError::EmptyInput);
    }
    client.config.validate()?;
    let chunk_size = client.config.effective_batch_size();
    let chunks: Vec<&[ChatRequest]> = requests.chunks(chunk_size).collect();
    let n_chunks = chunks.len();
    let mut chunk_outcomes: Vec<Option<Result<(Vec<ItemResult>, u64), ClientError>>> =
        (0..n_chunks).map(|_| None).collect();

    let workers = client.config.max_in_flight.min(n_chunks).max(1);
    if workers == 1 {
        for (idx, chunk) in chunks.iter().enumerate() {
            chunk_outcomes[idx] = Some(client.execute_chat(chunk));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let outcomes = Mutex::new(&mut chunk_outcomes);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= n_chunks {
                        break;
                    }
                    let outcome = client.execute_chat(chunks[idx]);
                    outcomes.lock().unwrap()[idx] = Some(outcome);
                });
            }
        });
    }

    let mut results = Vec::with_capacity(requests.len());
    let mut usage = TokenUsage::default();
    let mut transport_calls = 0u64;
    for (chunk, outcome) in chunks.iter().zip(chunk_outcomes.into_iter()) {
        let outcome = outcome.expect("all chunks executed");
        match outcome {
            Ok((items, calls)) => {
                transport_calls += calls;
                usage.request_count += calls;
                for (request, item) in chunk.iter().zip(items) {
                    match item {
                        Ok(chat) => {
                            usage.input_tokens += chat.usage.input_tokens;
                            usage.output_tokens += chat.usage.output_tokens;
                            results.push(Ok(RawModelResponse {
                                item_id: request.item_id.clone(),
                                text: chat.text,
                                usage: chat.usage,
                                latency_ms: 0,
                            }));
                        }
                        Err(reason) => {
                            if fail_fast {
                                return Err(ClientError::AbortedRun(format!(
                                    "item {} failed: {reason}",
                                    request.item_id
                                )));
                            }
                            results.push(Err(ItemFailure {
                                item_id: request.item_id.clone(),
                                reason,
                            }));
                        }
                    }
                }
            }
            Err(e) => {
                if fail_fast {
                    return Err(e);
                }
                // The whole chunk failed after retries: record each item.
                transport_calls += 1;
                usage.request_count += 1;
                for request in *chunk {
                    results.push(Err(ItemFailure {
                        item_id: request.item_id.clone(),
                        reason: e.to_string(),
                    }));
                }
            }
        }
    }
    Ok(BatchedRun {
        results,
        usage,
        transport_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::mock::{MockBackend, MockFault};
    use super::*;
    use crate::dataset::DatasetManifest;
    use std::collections::BTreeMap;

    fn manifest(per_class: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for class in CesClass::ALL {
            for i in 0..per_class {
                records.push(ImageRecord {
                    id: format!("{}_{i}", class.index()),
                    source: format!("mock://img/{}/{i}", class.index()),
                    label: Some(class),
                    metadata: BTreeMap::new(),
                });
            }
        }
        DatasetManifest::new("m", "1", records)
    }

    fn echo_client(manifest: &DatasetManifest, mode: BatchMode, batch_size: usize) -> ModelClient {
        let backend = Arc::new(MockBackend::echo(manifest, 7));
        let config = EndpointConfig::mock("mock-lvlm").with_mode(mode, batch_size);
        ModelClient::new(config, backend).with_clock(Arc::new(MockClock::default()))
    }

    #[test]
    fn caption_returns_fixture_text_verbatim() {
        let manifest = manifest(1);
        let backend = Arc::new(
            MockBackend::echo(&manifest, 7)
                .with_caption_fixture(&manifest.records[0].id, "A stone church on a hill."),
        );
        let client = ModelClient::new(EndpointConfig::mock("mock-lvlm"), backend)
            .with_clock(Arc::new(MockClock::default()));
        let caption = caption_image(&manifest.records[0], &client, CAPTION_INSTRUCTION).unwrap();
        assert_eq!(caption.text, "A stone church on a hill.");
        assert_eq!(caption.usage.request_count, 1);
    }

    #[test]
    fn retry_succeeds_after_two_rate_limits() {
        let manifest = manifest(1);
        let backend = Arc::new(MockBackend::echo(&manifest, 7).with_faults(vec![
            MockFault::RateLimited { retry_after_secs: 1 },
            MockFault::RateLimited { retry_after_secs: 1 },
        ]));
        let clock = Arc::new(MockClock::default());
        let client = ModelClient::new(EndpointConfig::mock("mock-lvlm"), backend.clone())
            .with_clock(clock.clone());
        let caption = caption_image(&manifest.records[0], &client, CAPTION_INSTRUCTION).unwrap();
        assert_eq!(caption.usage.request_count, 3);
        assert_eq!(backend.calls(), 3);
        // Virtual time advanced by the backoff sleeps.
        assert!(clock.now_millis() >= 2000);
    }

    #[test]
    fn retries_exhausted_surfaces_rate_limit() {
        let manifest = manifest(1);
        let faults = vec![MockFault::RateLimited { retry_after_secs: 1 }; 10];
        let backend = Arc::new(MockBackend::echo(&manifest, 7).with_faults(faults));
        let mut config = EndpointConfig::mock("mock-lvlm");
        config.max_retries = 2;
        let client =
            ModelClient::new(config, backend).with_clock(Arc::new(MockClock::default()));
        match caption_image(&manifest.records[0], &client, CAPTION_INSTRUCTION) {
            Err(ClientError::RateLimited { .. }) => {}
            other => panic!("expected RateLimited, got {other:?}"),
        }
    }

    #[test]
    fn fatal_4xx_does_not_retry() {
        let manifest = manifest(1);
        let backend = Arc::new(
            MockBackend::echo(&manifest, 7).with_faults(vec![MockFault::Status {
                code: 401,
                body: "unauthorized".to_string(),
            }]),
        );
        let client = ModelClient::new(EndpointConfig::mock("mock-lvlm"), backend.clone())
            .with_clock(Arc::new(MockClock::default()));
        match caption_image(&manifest.records[0], &client, CAPTION_INSTRUCTION) {
            Err(ClientError::Transport { status: 401, .. }) => {}
            other => panic!("expected Transport 401, got {other:?}"),
        }
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn empty_caption_is_rejected() {
        let manifest = manifest(1);
        let backend = Arc::new(
            MockBackend::echo(&manifest, 7).with_caption_fixture(&manifest.records[0].id, "   "),
        );
        let client = ModelClient::new(EndpointConfig::mock("mock-lvlm"), backend)
            .with_clock(Arc::new(MockClock::default()));
        match caption_image(&manifest.records[0], &client, CAPTION_INSTRUCTION) {
            Err(ClientError::EmptyResponse { .. }) => {}
            other => panic!("expected EmptyResponse, got {other:?}"),
        }
    }

    #[test]
    fn vqa_passes_mock_text_through() {
        let manifest = manifest(1);
        let client = echo_client(&manifest, BatchMode::NoBatch, 1);
        let record = manifest
            .records
            .iter()
            .find(|r| r.label == Some(CesClass::LandscapeNature))
            .unwrap();
        let response = classify_image_vqa(record, &client, "Classify the image into one of these categories: ...").unwrap();
        assert_eq!(response.text, "Landscape-Nature");
    }

    #[test]
    fn vqa_empty_response_is_rejected() {
        let manifest = manifest(1);
        let backend = Arc::new(
            MockBackend::echo(&manifest, 7).with_chat_fixture(&manifest.records[0].id, ""),
        );
        let client = ModelClient::new(EndpointConfig::mock("mock-lvlm"), backend)
            .with_clock(Arc::new(MockClock::default()));
        match classify_image_vqa(&manifest.records[0], &client, "Classify the image") {
            Err(ClientError::EmptyResponse { .. }) => {}
            other => panic!("expected EmptyResponse, got {other:?}"),
        }
    }

    #[test]
    fn unreadable_image_fails_before_transport() {
        let record = ImageRecord {
            id: "x".to_string(),
            source: "/nonexistent/path/img.jpg".to_string(),
            label: None,
            metadata: BTreeMap::new(),
        };
        let manifest = manifest(1);
        let backend = Arc::new(MockBackend::echo(&manifest, 7));
        let client = ModelClient::new(EndpointConfig::mock("mock-lvlm"), backend.clone());
        match embed_image(&record, &client) {
            Err(ClientError::ImageUnreadable { .. }) => {}
            other => panic!("expected ImageUnreadable, got {other:?}"),
        }
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn embed_text_is_deterministic_and_distinct() {
        let manifest = manifest(1);
        let backend = Arc::new(MockBackend::echo(&manifest, 7));
        let client = ModelClient::new(EndpointConfig::mock("mock-llm"), backend);
        let a1 = embed_text("a mountain trail", &client).unwrap();
        let a2 = embed_text("a mountain trail", &client).unwrap();
        assert_eq!(a1.values, a2.values);
        let b = embed_text("a plate of food", &client).unwrap();
        assert_ne!(a1.values, b.values);
    }

    #[test]
    fn embed_text_has_no_collisions_over_fixture_corpus() {
        let manifest = manifest(1);
        let backend = Arc::new(MockBackend::echo(&manifest, 7));
        let client = ModelClient::new(EndpointConfig::mock("mock-llm"), backend);
        // Every class caption plus punctuation/case variants.
        let mut corpus: Vec<String> = Vec::new();
        for class in CesClass::ALL {
            for word in super::mock::class_keywords(class) {
                corpus.push(format!("A photo of {word}."));
                corpus.push(format!("a photo of {word}"));
                corpus.push(word.to_string());
            }
        }
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for text in &corpus {
            let vector = embed_text(text, &client).unwrap().values;
            assert!(!seen.contains(&vector), "collision for {text:?}");
            seen.push(vector);
        }
    }

    #[test]
    fn embed_rejects_empty_text() {
        let manifest = manifest(1);
        let backend = Arc::new(MockBackend::echo(&manifest, 7));
        let client = ModelClient::new(EndpointConfig::mock("mock-llm"), backend);
        assert!(matches!(embed_text("  ", &client), Err(ClientError::EmptyInput)));
    }

    #[test]
    fn zero_shot_label_requires_evidence_and_always_calls() {
        let manifest = manifest(1);
        let backend = Arc::new(MockBackend::echo(&manifest, 7));
        let client = ModelClient::new(EndpointConfig::mock("mock-llm"), backend.clone());
        assert!(matches!(
            zero_shot_label(&CesClass::ALL, "  ", &client),
            Err(ClientError::EmptyInput)
        ));
        let evidence = "Given the keywords: food, wine, restaurant, dish. Which category best describes them: Gastronomy? Answer with the category name only.";
        let response = zero_shot_label(&[CesClass::Gastronomy], evidence, &client).unwrap();
        assert_eq!(response.text, "Gastronomy");
        assert_eq!(backend.calls(), 1, "single-candidate calls are not short-circuited");
    }

    #[test]
    fn batch_mode_uses_one_call_per_chunk() {
        let manifest = manifest(10); // 60 items
        let client = echo_client(&manifest, BatchMode::Batch, 50);
        let requests: Vec<ChatRequest> = manifest
            .records
            .iter()
            .map(|r| ChatRequest {
                item_id: r.id.clone(),
                prompt: "Classify the image".to_string(),
                image: Some(load_image_payload(r).unwrap()),
            })
            .collect();
        let n = requests.len();
        let run = run_batched(requests, &client, false).unwrap();
        assert_eq!(run.transport_calls, 2); // 50 + 10
        assert_eq!(run.results.len(), n);
        for (result, record) in run.results.iter().zip(&manifest.records) {
            assert_eq!(result.as_ref().unwrap().item_id, record.id);
        }
    }

    #[test]
    fn no_batch_mode_calls_once_per_item() {
        let manifest = manifest(5); // 30 items
        let client = echo_client(&manifest, BatchMode::NoBatch, 50);
        let requests: Vec<ChatRequest> = manifest
            .records
            .iter()
            .map(|r| ChatRequest {
                item_id: r.id.clone(),
                prompt: "Classify the image".to_string(),
                image: None,
            })
            .collect();
        let run = run_batched(requests, &client, false).unwrap();
        assert_eq!(run.transport_calls, 30);
    }

    #[test]
    fn usage_aggregates_additively() {
        let manifest = manifest(5); // 30 items
        // Echo mock charges 10 input / 2 output per chat item.
        let client = echo_client(&manifest, BatchMode::Batch, 7);
        let requests: Vec<ChatRequest> = manifest.records[..20]
            .iter()
            .map(|r| ChatRequest {
                item_id: r.id.clone(),
                prompt: "Classify the image".to_string(),
                image: None,
            })
            .collect();
        let run = run_batched(requests, &client, false).unwrap();
        assert_eq!(run.usage.input_tokens, 200);
        assert_eq!(run.usage.output_tokens, 40);
        let per_item: u64 = run.successes().map(|r| r.usage.input_tokens).sum();
        assert_eq!(per_item, run.usage.input_tokens);
    }

    #[test]
    fn item_failure_recorded_without_aborting() {
        let manifest = manifest(2); // 12 items
        let failing_id = manifest.records[7].id.clone();
        let backend =
            Arc::new(MockBackend::echo(&manifest, 7).with_item_failure(&failing_id, "scripted"));
        let config = EndpointConfig::mock("mock-lvlm").with_mode(BatchMode::Batch, 10);
        let client = ModelClient::new(config, backend).with_clock(Arc::new(MockClock::default()));
        let requests: Vec<ChatRequest> = manifest
            .records
            .iter()
            .map(|r| ChatRequest {
                item_id: r.id.clone(),
                prompt: "Classify the image".to_string(),
                image: None,
            })
            .collect();
        let run = run_batched(requests, &client, false).unwrap();
        assert_eq!(run.successes().count(), 11);
        let failures: Vec<&ItemFailure> = run.failures().collect();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].item_id, failing_id);
        // Order preserved around the failure.
        for (result, record) in run.results.iter().zip(&manifest.records) {
            let id = match result {
                Ok(r) => &r.item_id,
                Err(f) => &f.item_id,
            };
            assert_eq!(id, &record.id);
        }
    }

    #[test]
    fn fail_fast_aborts_on_item_failure() {
        let manifest = manifest(2);
        let failing_id = manifest.records[3].id.clone();
        let backend =
            Arc::new(MockBackend::echo(&manifest, 7).with_item_failure(&failing_id, "scripted"));
        let config = EndpointConfig::mock("mock-lvlm").with_mode(BatchMode::Batch, 10);
        let client = ModelClient::new(config, backend).with_clock(Arc::new(MockClock::default()));
        let requests: Vec<ChatRequest> = manifest
            .records
            .iter()
            .map(|r| ChatRequest {
                item_id: r.id.clone(),
                prompt: "Classify the image".to_string(),
                image: None,
            })
            .collect();
        assert!(matches!(
            run_batched(requests, &client, true),
            Err(ClientError::AbortedRun(_))
        ));
    }

    #[test]
    fn rate_limiter_caps_calls_per_window() {
        let limiter = RateLimiter::new(Some(5));
        let clock = MockClock::default();
        let mut stamps = Vec::new();
        for _ in 0..12 {
            limiter.acquire(&clock);
            stamps.push(clock.now_millis());
            clock.advance(100);
        }
        // Count calls inside any 60s window.
        for (i, start) in stamps.iter().enumerate() {
            let in_window = stamps[i..]
                .iter()
                .take_while(|t| **t < start + WINDOW_MILLIS)
                .count();
            assert!(in_window <= 5, "window starting at {start} had {in_window}");
        }
    }

    #[test]
    fn parallel_chunks_preserve_order() {
        let manifest = manifest(20); // 120 items
        let backend = Arc::new(MockBackend::echo(&manifest, 7));
        let mut config = EndpointConfig::mock("mock-lvlm").with_mode(BatchMode::Batch, 8);
        config.max_in_flight = 4;
        let client = ModelClient::new(config, backend).with_clock(Arc::new(MockClock::default()));
        let requests: Vec<ChatRequest> = manifest
            .records
            .iter()
            .map(|r| ChatRequest {
                item_id: r.id.clone(),
                prompt: "Classify the image".to_string(),
                image: None,
            })
            .collect();
        let run = run_batched(requests, &client, false).unwrap();
        assert_eq!(run.transport_calls, 15);
        for (result, record) in run.results.iter().zip(&manifest.records) {
            assert_eq!(result.as_ref().unwrap().item_id, record.id);
        }
    }
}
