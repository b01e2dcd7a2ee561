use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{request_json, ChatModel, ChatRequest, ClientError, Completion};
use crate::record::Usage;

/// Appended to the user turn when the endpoint cannot take a trailing
/// assistant message; the prefill follows it.
pub(crate) const CONTINUE_INSTRUCTION: &str =
    "\n\nBegin your reply with exactly the following text and continue from where it ends:\n\n";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    /// Send the prefill as a final assistant message to be continued.
    #[default]
    AssistantMessage,
    /// Fold the prefill into the user turn with an instruction to continue.
    AppendToUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay_ms: 1_000,
            max_delay_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry `n` (0-based): `base * 2^n`, capped.
    pub fn delay(&self, n: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << n.min(32));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

fn default_timeout_ms() -> u64 {
    120_000
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    /// Base URL up to and including the API version, e.g.
    /// `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. `None` for
    /// endpoints without authentication.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Overrides the per-task default when set.
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub prefill_mode: PrefillMode,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Additional request fields (e.g. server-specific options).
    #[serde(default)]
    pub extra_body: Option<serde_json::Value>,
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            max_tokens: None,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_in_flight(),
            prefill_mode: PrefillMode::default(),
            retry: RetryPolicy::default(),
            extra_body: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if self.timeout_ms == 0 {
            return Err("timeout_ms must be positive".into());
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("base_url {:?} is not an http(s) URL", self.base_url));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Blocking OpenAI-compatible chat-completions client.
pub struct HttpModel {
    endpoint: ModelEndpoint,
    http: reqwest::blocking::Client,
    /// Waits between retries; swappable so tests need not sleep.
    sleep: Box<dyn Fn(Duration) + Send + Sync>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(Completion),
    Retry(String),
    Fatal(ClientError),
}

impl HttpModel {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ClientError> {
        endpoint.validate().map_err(ClientError::Setup)?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| ClientError::Setup(e.to_string()))?;
        Ok(Self {
            endpoint,
            http,
            sleep: Box::new(std::thread::sleep),
        })
    }

    /// Replace the function used to wait between retries.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn api_key(&self) -> Result<Option<String>, ClientError> {
        match &self.endpoint.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                _ => Err(ClientError::AuthMissing(var.clone())),
            },
        }
    }

    fn attempt(&self, body: &str, key: Option<&str>, started: Instant, attempts: u32) -> Attempt {
        let mut req = self
            .http
            .post(self.endpoint.url())
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => return Attempt::Retry(e.to_string()),
            Err(e) => return Attempt::Fatal(ClientError::Setup(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => {}
            401 | 403 => return Attempt::Fatal(ClientError::AuthRejected { status, body: text }),
            408 | 429 | 500..=599 => return Attempt::Retry(format!("HTTP {status}: {text}")),
            _ => return Attempt::Fatal(ClientError::Http { status, body: text }),
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(ClientError::Decode(e.to_string())),
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Fatal(ClientError::Decode("no choices".into()));
        };
        Attempt::Done(Completion {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_default(),
            latency: started.elapsed(),
            usage: parsed.usage,
            raw: text,
            attempts,
        })
    }
}

impl ChatModel for HttpModel {
    fn name(&self) -> &str {
        &self.endpoint.model_name
    }

    fn request_body(&self, req: &ChatRequest<'_>) -> String {
        request_json(
            &self.endpoint.model_name,
            req.bundle,
            self.endpoint.max_tokens.unwrap_or(req.max_tokens),
            self.endpoint.prefill_mode,
            self.endpoint.extra_body.as_ref(),
        )
    }

    fn complete(&self, req: &ChatRequest<'_>) -> Result<Completion, ClientError> {
        // Resolve credentials before touching the network.
        let key = self.api_key()?;
        let body = self.request_body(req);
        let started = Instant::now();
        let policy = self.endpoint.retry;
        let mut last_delay = Duration::ZERO;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, key.as_deref(), started, attempts) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(why) => {
                    if attempts > policy.max_retries {
                        return Err(ClientError::RetriesExhausted { attempts, last: why });
                    }
                    let delay = policy.delay(attempts - 1).max(last_delay);
                    log::warn!("{}: attempt {attempts} failed ({why}); retrying in {delay:?}", self.endpoint.model_name);
                    (self.sleep)(delay);
                    last_delay = delay;
                }
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.endpoint.max_in_flight
    }
}
