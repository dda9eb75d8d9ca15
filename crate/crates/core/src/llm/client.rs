//! Chat-completion clients and the retry loop.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::ChatMessage;
use crate::seed;

/// One completion request. `instance_id` lets fixtures match by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub instance_id: String,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn prompt_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("http error: {0}")]
    Http(String),
    #[error("server returned status {0}")]
    Status(u16),
    #[error("malformed response body: {0}")]
    Body(String),
    #[error("injected failure")]
    Injected,
    #[error("no fixture matches request {0:?}")]
    FixtureMiss(String),
}

impl TransportError {
    /// Fixture misses are permanent; everything else may be retried.
    pub fn is_retryable(&self) -> bool {
        !matches!(self, TransportError::FixtureMiss(_))
    }
}

/// A source of completions. Implementations must be safe to call from
/// several threads at once.
pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).complete(request)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmClientConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Environment variable holding the bearer token.
    pub auth_env: Option<String>,
    /// Extra HTTP headers sent with every request.
    pub headers: BTreeMap<String, String>,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub retry_seed: u64,
    /// Prompts longer than this (in characters) are rejected unsent.
    pub max_prompt_chars: Option<usize>,
    /// Largest tolerated fraction of failed instances in a labeling run.
    pub failure_limit: f64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "default".into(),
            temperature: 0.0,
            timeout_ms: 60_000,
            max_retries: 3,
            max_in_flight: 4,
            auth_env: Some("LLM_API_KEY".into()),
            headers: BTreeMap::new(),
            backoff_base_ms: 200,
            backoff_max_ms: 10_000,
            retry_seed: 0,
            max_prompt_chars: None,
            failure_limit: 0.1,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.failure_limit) {
            return Err(format!("failure_limit must be in [0, 1], got {}", self.failure_limit));
        }
        if self.backoff_max_ms < self.backoff_base_ms {
            return Err("backoff_max_ms must be >= backoff_base_ms".into());
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (1-based) of the request keyed by
    /// `key`: exponential in `attempt`, capped, scaled by a jitter factor in
    /// [0.5, 1) drawn from a generator seeded by (retry_seed, key, attempt).
    pub fn backoff_delay(&self, key: &str, attempt: u32) -> Duration {
        let exp = self
            .backoff_base_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(32))
            .min(self.backoff_max_ms);
        let s = seed::derive_u64(seed::derive(self.retry_seed, key), u64::from(attempt));
        let jitter: f64 = seed::rng(s).gen_range(0.5..1.0);
        Duration::from_micros((exp as f64 * 1000.0 * jitter).round() as u64)
    }
}

/// Result of a request after retries.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{source} (after {attempts} attempts)")]
pub struct RetryExhausted {
    pub source: TransportError,
    pub attempts: u32,
}

/// Issue `request`, retrying retryable failures up to `max_retries` times.
pub fn complete_with_retry<C: LlmClient + ?Sized>(
    client: &C,
    config: &LlmClientConfig,
    request: &ChatRequest,
) -> Result<Completion, RetryExhausted> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match client.complete(request) {
            Ok(text) => return Ok(Completion { text, attempts }),
            Err(e) if e.is_retryable() && attempts <= config.max_retries => {
                let delay = config.backoff_delay(&request.instance_id, attempts);
                log::warn!(
                    "request {:?} failed ({e}); retry {attempts} in {delay:?}",
                    request.instance_id
                );
                std::thread::sleep(delay);
            }
            Err(source) => return Err(RetryExhausted { source, attempts }),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

/// Client for an OpenAI-style chat-completion endpoint.
pub struct HttpChatClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    token: Option<String>,
    headers: BTreeMap<String, String>,
}

impl HttpChatClient {
    pub fn new(config: &LlmClientConfig) -> Result<Self, String> {
        config.validate()?;
        let endpoint = config.endpoint.clone().ok_or("no endpoint configured")?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| e.to_string())?;
        let token = config
            .auth_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty());
        Ok(Self {
            http,
            endpoint,
            model: config.model.clone(),
            temperature: config.temperature,
            token,
            headers: config.headers.clone(),
        })
    }
}

impl LlmClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let body = WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: self.temperature,
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        for (k, v) in &self.headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let resp = req.send().map_err(|e| TransportError::Http(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError::Status(status.as_u16()));
        }
        let parsed: WireResponse = resp.json().map_err(|e| TransportError::Body(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError::Body("no choices".into()))
    }
}
