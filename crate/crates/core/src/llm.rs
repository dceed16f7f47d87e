//! Chat-completion client abstraction, an HTTP implementation with retry and
//! backoff, and transcript recording/replay.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::util::{jsonl_lines, sha256_hex};

pub const API_KEY_ENV: &str = "ITEMRAG_API_KEY";
pub const API_BASE_ENV: &str = "ITEMRAG_API_BASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl LlmRequest {
    /// Deterministic request (temperature 0).
    pub fn new(model: impl Into<String>, system: impl Into<String>, user: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            max_tokens,
            model: model.into(),
        }
    }

    /// Hash of the canonical JSON encoding.
    pub fn request_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("request to {endpoint} failed after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("request to {endpoint} timed out after {attempts} attempt(s)")]
    Timeout { endpoint: String, attempts: u32 },
    #[error("authentication rejected by {endpoint} (HTTP {status})")]
    Authentication { endpoint: String, status: u16 },
    #[error("{endpoint} returned HTTP {status}: {body}")]
    Http {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("unparseable response from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("client configuration: {0}")]
    Config(String),
    #[error("mock client: {0}")]
    Mock(String),
}

impl LlmError {
    /// Whether a caller-level retry could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport { .. } | LlmError::Timeout { .. })
    }
}

/// A chat-completion backend. Implementations are shared across worker
/// threads.
pub trait LlmClient: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError>;

    /// Identifies the model behind this client; part of cache keys.
    fn model_tag(&self) -> &str;
}

impl<T: LlmClient + ?Sized> LlmClient for std::sync::Arc<T> {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        (**self).complete(req)
    }

    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        (**self).complete(req)
    }

    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Connection(String),
}

/// One HTTP POST with a JSON body. Split out so retry logic can be tested
/// against a scripted transport.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &Value, timeout: Duration) -> Result<HttpReply, TransportFailure>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &Value, timeout: Duration) -> Result<HttpReply, TransportFailure> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportFailure::Timeout
                } else {
                    // without the URL, which is reported separately
                    TransportFailure::Connection(e.without_url().to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportFailure::Timeout
            } else {
                TransportFailure::Connection(e.without_url().to_string())
            }
        })?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(20),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Clone)]
pub struct HttpConfig {
    pub api_base: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpConfig")
            .field("api_base", &self.api_base)
            .field("api_key", &"<redacted>")
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .field("retry", &self.retry)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl HttpConfig {
    /// Reads the endpoint and credential from `ITEMRAG_API_BASE` / `ITEMRAG_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let api_base = std::env::var(API_BASE_ENV).map_err(|_| LlmError::Config(format!("{API_BASE_ENV} is not set")))?;
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| LlmError::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self {
            api_base,
            api_key,
            model: model.into(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
        })
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    active: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    fn new(cap: usize) -> Self {
        Self {
            active: Mutex::new(0),
            freed: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("semaphore poisoned");
        while *active >= self.cap {
            active = self.freed.wait(active).expect("semaphore poisoned");
        }
        *active += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("semaphore poisoned");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpLlmClient<T: HttpTransport = ReqwestTransport> {
    config: HttpConfig,
    transport: T,
    in_flight: InFlight,
}

impl<T: HttpTransport> fmt::Debug for HttpLlmClient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpLlmClient").field("config", &self.config).finish()
    }
}

impl HttpLlmClient<ReqwestTransport> {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        Ok(Self::with_transport(config, ReqwestTransport::new()?))
    }
}

impl<T: HttpTransport> HttpLlmClient<T> {
    pub fn with_transport(config: HttpConfig, transport: T) -> Self {
        let in_flight = InFlight::new(config.max_in_flight);
        Self {
            config,
            transport,
            in_flight,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.api_base.trim_end_matches('/'), path)
    }

    fn scrub(&self, text: &str) -> String {
        if self.config.api_key.is_empty() {
            return text.to_string();
        }
        text.replace(&self.config.api_key, "<redacted>")
    }

    /// POSTs `body` to `{api_base}/{path}`, retrying 429, 5xx and transport
    /// failures with exponential backoff. Returns the parsed JSON body.
    fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let url = self.url(path);
        let _slot = self.in_flight.acquire();
        let max_attempts = 1 + self.config.retry.max_retries;
        let mut last_failure = None;
        for attempt in 0..max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.delay(attempt - 1));
            }
            match self.transport.post_json(&url, &self.config.api_key, body, self.config.timeout) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return serde_json::from_str(&reply.body).map_err(|e| LlmError::Protocol {
                        endpoint: url.clone(),
                        message: e.to_string(),
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(LlmError::Authentication {
                        endpoint: url,
                        status: reply.status,
                    });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    tracing::debug!(status = reply.status, attempt, endpoint = %url, "retryable HTTP status");
                    last_failure = Some(format!("HTTP {}", reply.status));
                }
                Ok(reply) => {
                    let mut snippet = self.scrub(&reply.body);
                    snippet.truncate(snippet.floor_char_boundary(300));
                    return Err(LlmError::Http {
                        endpoint: url,
                        status: reply.status,
                        body: snippet,
                    });
                }
                Err(TransportFailure::Timeout) => {
                    tracing::debug!(attempt, endpoint = %url, "request timed out");
                    last_failure = None;
                }
                Err(TransportFailure::Connection(msg)) => {
                    tracing::debug!(attempt, endpoint = %url, "connection failure");
                    last_failure = Some(self.scrub(&msg));
                }
            }
        }
        Err(match last_failure {
            None => LlmError::Timeout {
                endpoint: url,
                attempts: max_attempts,
            },
            Some(message) => LlmError::Transport {
                endpoint: url,
                attempts: max_attempts,
                message,
            },
        })
    }

    /// Embeds texts through `{api_base}/embeddings`, returning vectors in
    /// input order.
    pub fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        let url = self.url("embeddings");
        let value = self.post_with_retry("embeddings", &json!({"model": model, "input": texts}))?;
        let protocol = |message: &str| LlmError::Protocol {
            endpoint: url.clone(),
            message: message.to_string(),
        };
        let data = value["data"].as_array().ok_or_else(|| protocol("missing `data` array"))?;
        if data.len() != texts.len() {
            return Err(protocol("embedding count does not match input count"));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, entry) in data.iter().enumerate() {
            let slot = entry["index"].as_u64().map_or(pos, |i| i as usize);
            let vector = entry["embedding"]
                .as_array()
                .ok_or_else(|| protocol("missing `embedding`"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| protocol("non-numeric embedding component")))
                .collect::<Result<Vec<f64>, _>>()?;
            *out.get_mut(slot).ok_or_else(|| protocol("embedding index out of range"))? = vector;
        }
        Ok(out)
    }
}

impl<T: HttpTransport> LlmClient for HttpLlmClient<T> {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        if req.user.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user message is empty".into()));
        }
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(json!({"role": "system", "content": req.system}));
        }
        messages.push(json!({"role": "user", "content": req.user}));
        let body = json!({
            "model": req.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let started = Instant::now();
        let value = self.post_with_retry("chat/completions", &body)?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Protocol {
                endpoint: self.url("chat/completions"),
                message: "missing choices[0].message.content".into(),
            })?
            .to_string();
        let usage = Usage {
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(LlmResponse {
            text,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn model_tag(&self) -> &str {
        &self.config.model
    }
}

// ---------------------------------------------------------------------------
// Transcripts

#[derive(Serialize, Deserialize)]
struct ReplayEntry {
    request_hash: String,
    request: LlmRequest,
    response: LlmResponse,
}

/// Forwards to an inner client and appends every exchange to a replay file.
pub struct RecordingClient<C> {
    inner: C,
    out: Mutex<BufWriter<File>>,
}

impl<C: LlmClient> RecordingClient<C> {
    pub fn new(inner: C, path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            out: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let response = self.inner.complete(req)?;
        let entry = ReplayEntry {
            request_hash: req.request_hash(),
            request: req.clone(),
            response: response.clone(),
        };
        let mut out = self.out.lock().expect("replay writer poisoned");
        let written = serde_json::to_string(&entry)
            .map_err(io::Error::from)
            .and_then(|line| writeln!(out, "{line}"))
            .and_then(|_| out.flush());
        if let Err(err) = written {
            tracing::warn!(%err, "failed to record transcript entry");
        }
        Ok(response)
    }

    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }
}

/// Serves responses from a replay file; unknown requests are errors.
pub struct ReplayClient {
    model_tag: String,
    entries: HashMap<String, LlmResponse>,
}

impl ReplayClient {
    pub fn load(path: &Path, model_tag: impl Into<String>) -> io::Result<Self> {
        let mut entries = HashMap::new();
        for line in jsonl_lines(path)? {
            let (_, line) = line?;
            let entry: ReplayEntry = serde_json::from_str(&line)?;
            entries.insert(entry.request_hash, entry.response);
        }
        Ok(Self {
            model_tag: model_tag.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl LlmClient for ReplayClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.entries
            .get(&req.request_hash())
            .cloned()
            .ok_or_else(|| LlmError::Mock(format!("no recorded response for request {}", req.request_hash())))
    }

    fn model_tag(&self) -> &str {
        &self.model_tag
    }
}
