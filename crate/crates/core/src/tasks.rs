//! Task types, prompt construction and the experiment grid.
//!
//! Every prompt is a two-message chat: one user turn carrying the
//! instruction, the query and the code block, followed by an assistant
//! prefill that pins the shape of the answer (`assert f(81) == ` ...). With
//! query-aware contextualization (QAC) the query is repeated after the code
//! block as well as before it.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, TokenEstimator};
use crate::mixer::{self, AssembledContext, MixError};
use crate::seed;
use crate::semtrace::{self, SemTraceTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    CruxevalIn,
    CruxevalOut,
    SemtraceOut,
    RetrieveFunction,
    RetrieveLine,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::CruxevalIn,
        TaskType::CruxevalOut,
        TaskType::SemtraceOut,
        TaskType::RetrieveFunction,
        TaskType::RetrieveLine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::CruxevalIn => "cruxeval_in",
            TaskType::CruxevalOut => "cruxeval_out",
            TaskType::SemtraceOut => "semtrace_out",
            TaskType::RetrieveFunction => "retrieve_function",
            TaskType::RetrieveLine => "retrieve_line",
        }
    }

    pub fn is_retrieval(self) -> bool {
        matches!(self, TaskType::RetrieveFunction | TaskType::RetrieveLine)
    }

    /// Default completion budget.
    pub fn default_max_tokens(self) -> u32 {
        match self {
            TaskType::RetrieveFunction => 1024,
            _ => 512,
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task type {s:?}"))
    }
}

/// A function under evaluation plus its input/output literals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSnippet {
    pub id: String,
    #[serde(alias = "code")]
    pub source: String,
    /// Call-argument text, e.g. `81` or `'abc', 3`.
    #[serde(default)]
    pub input: Option<String>,
    /// Output literal.
    #[serde(default)]
    pub output: Option<String>,
}

impl TargetSnippet {
    pub fn new(id: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            input: None,
            output: None,
        }
    }

    pub fn with_io(mut self, input: impl Into<String>, output: impl Into<String>) -> Self {
        self.input = Some(input.into());
        self.output = Some(output.into());
        self
    }

    pub fn from_semtrace(task: &SemTraceTask) -> Self {
        Self::new(semtrace::task_id(task), semtrace::render(task))
            .with_io(task.x.to_string(), task.expected_literal())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryParams {
    /// Input prediction: the output is given.
    Output { output: String },
    /// Output prediction: the input is given.
    Input { input: String },
    Function { start: String, end: String },
    Line { key: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task_type: TaskType,
    pub target: TargetSnippet,
    pub context: AssembledContext,
    pub query: QueryParams,
    pub gold: String,
    /// Whether prediction prompts show line keys. Retrieval always does.
    #[serde(default)]
    pub show_keys: bool,
    #[serde(default)]
    pub distractors_with_replacement: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<Message>,
}

impl PromptBundle {
    /// The trailing assistant message.
    pub fn prefill(&self) -> &str {
        match self.messages.last() {
            Some(Message {
                role: Role::Assistant,
                content,
            }) => content,
            _ => "",
        }
    }

    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("target {id}: missing {field} for {task}")]
    MissingValue {
        id: String,
        field: &'static str,
        task: TaskType,
    },
    #[error("no targets to build instances from")]
    NoTargets,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("target {id}: no retrievable line")]
    NoLine { id: String },
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error("corpus: {0}")]
    Corpus(String),
}

impl From<CorpusError> for TaskError {
    fn from(e: CorpusError) -> Self {
        TaskError::Corpus(e.to_string())
    }
}

const INPUT_INSTRUCTION: &str = "You are given a number of Python functions and an assertion containing an output of one of the functions. Find any input such that executing that function on the input leads to the given output. There may be multiple answers, but you should only output one.";

const OUTPUT_INSTRUCTION: &str = "You are given a number of Python functions and an assertion containing an input to one of the functions. Complete the assertion with a literal (no unsimplified expressions, no function calls) containing the output when executing the provided code on the given input, even if the function is incorrect or incomplete. Do NOT output any extra information.";

fn function_query(start: &str, end: &str, place: &str) -> String {
    format!(
        "Each line in the code block {place} starts with a random key. I'm looking for a function starting at key `{start}` and ending at key `{end}` in the code snippet {place}. Can you help me find it?"
    )
}

fn line_query(key: &str, place: &str) -> String {
    format!(
        "Each line in the code block {place} starts with a random key. I'm looking for a line with key `{key}` in the code snippet {place}. Can you help me find it?"
    )
}

/// The query paragraphs placed before and after the code block.
pub fn query_paragraphs(query: &QueryParams) -> (String, String) {
    match query {
        QueryParams::Output { output } => {
            let q = format!("{INPUT_INSTRUCTION}\n\n[ASSERTION]\nassert {output} == f(??)\n[/ASSERTION]");
            let post = format!("[ASSERTION]\nassert {output} == f(??)\n[/ASSERTION]\n\n{INPUT_INSTRUCTION}");
            (q, post)
        }
        QueryParams::Input { input } => {
            let q = format!("{OUTPUT_INSTRUCTION}\n\n[ASSERTION]\nassert f({input}) == ??\n[/ASSERTION]");
            let post = format!("[ASSERTION]\nassert f({input}) == ??\n[/ASSERTION]\n\n{OUTPUT_INSTRUCTION}");
            (q, post)
        }
        QueryParams::Function { start, end } => {
            (function_query(start, end, "below"), function_query(start, end, "above"))
        }
        QueryParams::Line { key } => (line_query(key, "below"), line_query(key, "above")),
    }
}

/// The user turn for a query and an already rendered code block.
pub fn render_user_message(query: &QueryParams, code_block: &str, qac: bool) -> String {
    let (pre, post) = query_paragraphs(query);
    let body = match query {
        QueryParams::Output { .. } | QueryParams::Input { .. } => {
            format!("[FUNCTIONS]\n{code_block}\n[/FUNCTIONS]")
        }
        QueryParams::Function { .. } | QueryParams::Line { .. } => {
            format!("```python\n{code_block}\n```")
        }
    };
    if qac {
        format!("{pre}\n\n{body}\n\n{post}")
    } else {
        format!("{pre}\n\n{body}")
    }
}

pub fn render_prefill(query: &QueryParams) -> String {
    match query {
        QueryParams::Output { output } => {
            format!("Sure! Here is the corresponding input:\n\n```python\nassert {output} == f(")
        }
        QueryParams::Input { input } => {
            format!("Sure! Here is the corresponding output:\n\n```python\nassert f({input}) == ")
        }
        QueryParams::Function { start, end } => format!(
            "Sure! Here is the full function starting at key `{start}` and ending at key `{end}`:\n\n```python"
        ),
        QueryParams::Line { key } => format!("Sure! Here is the line with key {key}:\n\n```python"),
    }
}

pub fn build_prompt(instance: &TaskInstance, qac: bool) -> PromptBundle {
    let keys = instance.task_type.is_retrieval() || instance.show_keys;
    let code = instance.context.code_block(keys);
    PromptBundle {
        messages: vec![
            Message {
                role: Role::User,
                content: render_user_message(&instance.query, &code, qac),
            },
            Message {
                role: Role::Assistant,
                content: render_prefill(&instance.query),
            },
        ],
    }
}

fn required<'a>(target: &'a TargetSnippet, field: &'static str, task: TaskType) -> Result<&'a str, TaskError> {
    let v = match field {
        "input" => target.input.as_deref(),
        _ => target.output.as_deref(),
    };
    v.ok_or_else(|| TaskError::MissingValue {
        id: target.id.clone(),
        field,
        task,
    })
}

/// Index (within the target's lines) of the line to retrieve: uniform over
/// non-blank lines after the signature.
fn pick_line(target: &TargetSnippet, seed: u64) -> Result<usize, TaskError> {
    let candidates: Vec<usize> = target
        .source
        .split('\n')
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i)
        .collect();
    candidates
        .choose(&mut seed::rng(seed))
        .copied()
        .ok_or_else(|| TaskError::NoLine {
            id: target.id.clone(),
        })
}

/// Query parameters and gold answer for a target placed in `ctx`.
pub fn make_query(
    task_type: TaskType,
    target: &TargetSnippet,
    ctx: &AssembledContext,
    line_seed: u64,
) -> Result<(QueryParams, String), TaskError> {
    let tlines = ctx.target_lines();
    Ok(match task_type {
        TaskType::CruxevalIn => (
            QueryParams::Output {
                output: required(target, "output", task_type)?.to_string(),
            },
            required(target, "input", task_type)?.to_string(),
        ),
        TaskType::CruxevalOut | TaskType::SemtraceOut => (
            QueryParams::Input {
                input: required(target, "input", task_type)?.to_string(),
            },
            required(target, "output", task_type)?.to_string(),
        ),
        TaskType::RetrieveFunction => {
            let last = tlines
                .iter()
                .rposition(|l| !l.text.trim().is_empty())
                .unwrap_or(tlines.len() - 1);
            (
                QueryParams::Function {
                    start: tlines[0].key.clone(),
                    end: tlines[last].key.clone(),
                },
                target.source.clone(),
            )
        }
        TaskType::RetrieveLine => {
            let i = pick_line(target, line_seed)?;
            (
                QueryParams::Line {
                    key: tlines[i].key.clone(),
                },
                tlines[i].text.clone(),
            )
        }
    })
}

/// Expected answer for an instance.
pub fn gold_answer(instance: &TaskInstance) -> String {
    match &instance.query {
        QueryParams::Line { key } => instance
            .context
            .line_by_key(key)
            .map(|l| l.text.clone())
            .unwrap_or_default(),
        QueryParams::Function { .. } => instance.target.source.clone(),
        _ => instance.gold.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceGrid {
    pub task_type: TaskType,
    pub distractor_counts: Vec<usize>,
    pub positions: usize,
    #[serde(default = "one")]
    pub subset_fraction: f64,
    /// Drives target subsampling and line choice, and stands in for the
    /// other seeds when they are not given.
    pub seed: u64,
    /// Drives distractor sampling.
    #[serde(default)]
    pub distractor_seed: Option<u64>,
    /// Drives hex-key assignment.
    #[serde(default)]
    pub key_seed: Option<u64>,
    #[serde(default)]
    pub show_keys: bool,
}

fn one() -> f64 {
    1.0
}

/// Seeded subsample of `round(n * fraction)` items, original order kept.
pub fn subsample<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    if fraction >= 1.0 {
        return items.to_vec();
    }
    let keep = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len());
    let mut picks = index::sample(&mut seed::rng(seed), items.len(), keep).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| items[i].clone()).collect()
}

pub fn instance_id(task: TaskType, target: &str, count: usize, position: usize) -> String {
    format!("{task}/{target}/n{count}/p{position}")
}

/// Build the full grid: targets x distractor counts x positions.
///
/// Distractors are drawn once per (target, count) and shared across that
/// pair's positions, so position is the only factor that varies. A count
/// of 0 yields a single distractor-free instance.
pub fn make_instances(
    targets: &[TargetSnippet],
    corpus: &Corpus,
    grid: &InstanceGrid,
    tokens: &dyn TokenEstimator,
) -> Result<Vec<TaskInstance>, TaskError> {
    if targets.is_empty() {
        return Err(TaskError::NoTargets);
    }
    if grid.positions < 2 {
        return Err(TaskError::Grid(format!("positions must be >= 2, got {}", grid.positions)));
    }
    if grid.distractor_counts.is_empty() {
        return Err(TaskError::Grid("no distractor counts".into()));
    }
    if !(grid.subset_fraction > 0.0 && grid.subset_fraction <= 1.0) {
        return Err(TaskError::Grid(format!("subset fraction {} not in (0, 1]", grid.subset_fraction)));
    }
    let chosen = subsample(targets, grid.subset_fraction, seed::derive(grid.seed, &[1]));
    let mut out = Vec::new();
    for target in &chosen {
        let tid = seed::hash_str(&target.id);
        for &count in &grid.distractor_counts {
            let sample = corpus.sample_distractors(count, seed::derive(grid.distractor_seed.unwrap_or(grid.seed), &[2, tid, count as u64]))?;
            let line_seed = seed::derive(grid.seed, &[4, tid, count as u64]);
            let positions = if count == 0 { 1 } else { grid.positions };
            for pos in 0..positions {
                let key_seed = seed::derive(grid.key_seed.unwrap_or(grid.seed), &[3, tid, count as u64, pos as u64]);
                let ctx = mixer::mix(target, &sample.functions, pos, grid.positions, key_seed, tokens)?;
                let (query, gold) = make_query(grid.task_type, target, &ctx, line_seed)?;
                out.push(TaskInstance {
                    id: instance_id(grid.task_type, &target.id, count, pos),
                    task_type: grid.task_type,
                    target: target.clone(),
                    context: ctx,
                    query,
                    gold,
                    show_keys: grid.show_keys,
                    distractors_with_replacement: sample.with_replacement,
                });
            }
        }
    }
    Ok(out)
}
