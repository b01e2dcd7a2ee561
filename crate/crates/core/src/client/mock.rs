use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{request_json, ChatModel, ChatRequest, ClientError, Completion, PrefillMode};
use crate::corpus::{SimpleTokenizer, TokenEstimator};
use crate::record::Usage;
use crate::tasks::{gold_answer, QueryParams, TaskInstance};

/// What the truncating mock says when it cannot see the target.
pub const REFUSAL: &str = "I could not find that function in the code.\n```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockKind {
    /// Answers every instance correctly from its gold answer.
    Oracle,
    /// Reads only the first `max_tokens` tokens of the user turn; answers
    /// correctly when the whole target lies inside them, refuses otherwise.
    Truncating { max_tokens: usize },
    /// Returns the prefill unchanged.
    Echo,
}

/// Deterministic offline stand-in for a chat endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MockModel {
    pub kind: MockKind,
    /// Artificial per-call latency.
    pub delay_ms: u64,
    pub max_in_flight: usize,
    name: String,
}

impl MockModel {
    pub fn new(kind: MockKind) -> Self {
        let name = match kind {
            MockKind::Oracle => "mock-oracle".to_string(),
            MockKind::Truncating { max_tokens } => format!("mock-truncating-{max_tokens}"),
            MockKind::Echo => "mock-echo".to_string(),
        };
        Self {
            kind,
            delay_ms: 0,
            max_in_flight: 1,
            name,
        }
    }

    pub fn with_delay(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }

    pub fn with_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    fn answer(&self, req: &ChatRequest<'_>) -> String {
        match self.kind {
            MockKind::Oracle => correct_continuation(req.instance),
            MockKind::Echo => req.bundle.prefill().to_string(),
            MockKind::Truncating { max_tokens } => {
                let user = req.bundle.user_text();
                let visible = SimpleTokenizer.prefix_end(user, max_tokens);
                match target_end_offset(req.instance, user) {
                    Some(end) if end <= visible => correct_continuation(req.instance),
                    _ => REFUSAL.to_string(),
                }
            }
        }
    }
}

/// What a perfect model would generate after the prefill.
pub fn correct_continuation(instance: &TaskInstance) -> String {
    let gold = gold_answer(instance);
    match instance.query {
        QueryParams::Input { .. } => format!("{gold}\n```"),
        QueryParams::Output { .. } => format!("{gold})\n```"),
        QueryParams::Function { .. } | QueryParams::Line { .. } => format!("\n{gold}\n```"),
    }
}

/// Byte offset in the user turn just past the last target line.
pub fn target_end_offset(instance: &TaskInstance, user: &str) -> Option<usize> {
    let keys = instance.task_type.is_retrieval() || instance.show_keys;
    let block = instance.context.code_block(keys);
    let start = user.find(&block)?;
    let ctx = &instance.context;
    let upto: usize = ctx.lines[..=ctx.target_span.1]
        .iter()
        .map(|l| if keys { l.keyed().len() } else { l.text.len() } + 1)
        .sum();
    Some(start + upto - 1)
}

impl ChatModel for MockModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn request_body(&self, req: &ChatRequest<'_>) -> String {
        request_json(&self.name, req.bundle, req.max_tokens, PrefillMode::AssistantMessage, None)
    }

    fn complete(&self, req: &ChatRequest<'_>) -> Result<Completion, ClientError> {
        let started = Instant::now();
        if self.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.delay_ms));
        }
        let text = self.answer(req);
        let usage = Usage {
            prompt_tokens: req.bundle.messages.iter().map(|m| SimpleTokenizer.count(&m.content) as u64).sum(),
            completion_tokens: SimpleTokenizer.count(&text) as u64,
        };
        let raw = serde_json::json!({
            "object": "chat.completion",
            "model": self.name,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }],
            "usage": usage,
        })
        .to_string();
        Ok(Completion {
            text,
            finish_reason: "stop".into(),
            latency: started.elapsed(),
            usage: Some(usage),
            raw,
            attempts: 1,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
