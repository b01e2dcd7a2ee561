//! One line of a run log.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::scoring::Score;
use crate::tasks::{PromptBundle, TaskType};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// A single model call, its verbatim inputs and outputs, and its grade.
///
/// Records are only ever appended. Everything except `latency_ms` is a
/// deterministic function of the run configuration and the model's reply,
/// so two runs of the same config against a deterministic model produce
/// identical logs modulo timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub instance_id: String,
    pub run_id: String,
    pub config_hash: String,
    pub model: String,
    pub task_type: TaskType,
    pub target_id: String,
    pub position_index: usize,
    pub positions: usize,
    pub distractor_count: usize,
    pub granularity: Ratio<u64>,
    pub prompt: PromptBundle,
    /// Exact request body sent to the endpoint.
    pub request: String,
    pub completion: Option<String>,
    /// Verbatim response body.
    pub raw_response: Option<String>,
    pub finish_reason: Option<String>,
    pub usage: Option<Usage>,
    pub score: Option<Score>,
    pub attempts: u32,
    pub latency_ms: u64,
    pub error: Option<String>,
}

impl EvalRecord {
    /// A record counts as done when the model answered; failed calls are
    /// retried on resume.
    pub fn is_complete(&self) -> bool {
        self.error.is_none() && self.completion.is_some()
    }
}
