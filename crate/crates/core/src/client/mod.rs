//! Chat-completion clients.
//!
//! Every model sits behind [`ChatModel`]: the HTTP client speaks the
//! OpenAI-compatible chat-completions protocol with greedy decoding, and
//! the mock models answer deterministically from the task instance so the
//! whole pipeline can be exercised offline.

mod http;
mod mock;
mod pool;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::Usage;
use crate::tasks::{PromptBundle, Role, TaskInstance};

pub use http::{HttpModel, ModelEndpoint, PrefillMode, RetryPolicy};
pub use mock::{MockKind, MockModel, REFUSAL};
pub use pool::{dispatch, InFlightGauge};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    /// Text generated after the prefill.
    pub text: String,
    pub finish_reason: String,
    pub latency: Duration,
    pub usage: Option<Usage>,
    /// Verbatim response body.
    pub raw: String,
    /// Attempts used, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("endpoint rejected credentials (HTTP {status}): {body}")]
    AuthRejected { status: u16, body: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("client setup: {0}")]
    Setup(String),
}

impl ClientError {
    pub fn attempts(&self) -> u32 {
        match self {
            ClientError::RetriesExhausted { attempts, .. } => *attempts,
            ClientError::AuthMissing(_) | ClientError::Setup(_) => 0,
            _ => 1,
        }
    }
}

/// Everything a model needs to answer one instance.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub bundle: &'a PromptBundle,
    /// Mock models read the answer key from here; real endpoints ignore it.
    pub instance: &'a TaskInstance,
    pub max_tokens: u32,
}

pub trait ChatModel: Send + Sync {
    /// Name recorded in logs and used to group results.
    fn name(&self) -> &str;

    /// The exact request body [`ChatModel::complete`] sends for `req`.
    fn request_body(&self, req: &ChatRequest<'_>) -> String;

    fn complete(&self, req: &ChatRequest<'_>) -> Result<Completion, ClientError>;

    /// Upper bound on concurrent calls this model accepts.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// How the prefill is carried on the wire.
pub(crate) fn wire_messages(bundle: &PromptBundle, mode: PrefillMode) -> Vec<serde_json::Value> {
    let role = |r: Role| match r {
        Role::User => "user",
        Role::Assistant => "assistant",
    };
    let prefill = bundle.prefill();
    match mode {
        PrefillMode::AssistantMessage => bundle
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": role(m.role), "content": m.content}))
            .collect(),
        PrefillMode::AppendToUser => {
            let mut msgs: Vec<_> = bundle.messages.iter().collect();
            if msgs.last().is_some_and(|m| m.role == Role::Assistant) {
                msgs.pop();
            }
            let last_user = msgs.iter().rposition(|m| m.role == Role::User);
            msgs.iter()
                .enumerate()
                .map(|(i, m)| {
                    let content = if Some(i) == last_user && !prefill.is_empty() {
                        format!("{}{}{prefill}", m.content, http::CONTINUE_INSTRUCTION)
                    } else {
                        m.content.clone()
                    };
                    serde_json::json!({"role": role(m.role), "content": content})
                })
                .collect()
        }
    }
}

/// The chat-completions request body with greedy decoding. Extra fields
/// are merged in but cannot override the decoding settings.
pub(crate) fn request_json(model: &str, bundle: &PromptBundle, max_tokens: u32, mode: PrefillMode, extra: Option<&serde_json::Value>) -> String {
    let mut body = serde_json::json!({
        "model": model,
        "messages": wire_messages(bundle, mode),
        "temperature": 0,
        "top_p": 1,
        "max_tokens": max_tokens,
    });
    if let (Some(serde_json::Value::Object(extra)), Some(obj)) = (extra, body.as_object_mut()) {
        for (k, v) in extra {
            obj.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    body.to_string()
}
