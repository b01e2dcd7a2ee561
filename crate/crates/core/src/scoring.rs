//! Grading of model completions.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::exec::{ExecRequest, ExecStatus, Executor};
use crate::literal::{parse_literal, parse_literal_prefix, LiteralValue};
use crate::tasks::{QueryParams, TaskInstance, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    #[default]
    None,
    ParseError,
    LengthMismatch,
    WrongValue,
    /// Needed the execution oracle, which was not available.
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub exact: bool,
    /// Share of correct list positions; prediction tasks only.
    pub partial: Option<Ratio<u64>>,
    /// The answer contained at least one compound `+`/`-` expression.
    pub unresolved: bool,
    /// Canonical literal of the parsed answer.
    pub parsed_answer: Option<String>,
    pub failure_kind: FailureKind,
}

impl Score {
    fn failed(kind: FailureKind, partial: Option<Ratio<u64>>) -> Self {
        Self {
            exact: false,
            partial,
            unresolved: false,
            parsed_answer: None,
            failure_kind: kind,
        }
    }

    pub fn partial_f64(&self) -> Option<f64> {
        self.partial.map(|r| *r.numer() as f64 / *r.denom() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalGranularity {
    Line,
    Function,
}

const FENCE: &str = "```";

/// Drop a leading code-fence opener (with optional language tag).
fn strip_opening_fence(text: &str) -> &str {
    let t = text.trim_start();
    match t.strip_prefix(FENCE) {
        Some(rest) => match rest.find('\n') {
            Some(nl) if rest[..nl].trim().chars().all(|c| c.is_alphanumeric()) => &rest[nl + 1..],
            None if rest.trim().chars().all(|c| c.is_alphanumeric()) => "",
            _ => text,
        },
        None => text,
    }
}

fn before_fence(text: &str) -> &str {
    text.find(FENCE).map_or(text, |i| &text[..i])
}

/// Span of the argument list closing `f(`: everything up to the matching
/// `)` at depth zero, skipping string contents.
fn call_args(text: &str) -> Option<&str> {
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => quote = Some(c),
            '(' | '[' | '{' => depth += 1,
            ')' if depth == 0 => return Some(&text[..i]),
            ')' | ']' | '}' => depth -= 1,
            _ => {}
        }
    }
    None
}

/// Pull the answer out of a completion (the text generated after the
/// prefill).
///
/// * output prediction: the first complete literal or expression;
/// * input prediction: the argument text up to the closing `)` of `f(`;
/// * retrieval: the fenced code, fences removed, inner bytes intact.
pub fn extract_answer(completion: &str, task_type: TaskType) -> String {
    match task_type {
        TaskType::RetrieveFunction | TaskType::RetrieveLine => {
            let body = strip_opening_fence(completion);
            let body = before_fence(body);
            body.strip_prefix('\n').unwrap_or(body).trim_end_matches([' ', '\t', '\n', '\r']).to_string()
        }
        TaskType::CruxevalIn => {
            let mut text = before_fence(strip_opening_fence(completion)).trim();
            // A model that ignores the prefill restates the assertion.
            if let Some(idx) = text.find("== f(") {
                if text.starts_with("assert") {
                    text = &text[idx + 5..];
                }
            }
            call_args(text).unwrap_or(text).trim().to_string()
        }
        TaskType::CruxevalOut | TaskType::SemtraceOut => {
            let mut text = before_fence(strip_opening_fence(completion)).trim();
            if text.starts_with("assert") {
                if let Some(idx) = text.find("==") {
                    text = text[idx + 2..].trim_start();
                }
            }
            match parse_literal_prefix(text) {
                Ok((_, end)) => text[..end].trim().to_string(),
                Err(_) => text.lines().next().unwrap_or("").trim().to_string(),
            }
        }
    }
}

/// Positionwise matches over `min(len)`, divided by the gold length.
pub fn partial_match(answer: &[LiteralValue], gold: &[LiteralValue]) -> Ratio<u64> {
    if gold.is_empty() {
        return Ratio::from_integer(u64::from(answer.is_empty()));
    }
    let hits = answer.iter().zip(gold).filter(|(a, g)| a == g).count() as u64;
    Ratio::new(hits, gold.len() as u64)
}

/// Grade an output-prediction answer against the gold literal.
///
/// Arithmetic left in the answer is evaluated and not penalized; the score
/// only records that it happened.
pub fn score_prediction(answer: &str, gold: &LiteralValue, task_type: TaskType) -> Score {
    let elementwise = task_type == TaskType::SemtraceOut && gold.as_list().is_some();
    let zero = Some(Ratio::from_integer(0));
    let parsed = match parse_literal(answer) {
        Ok(p) => p,
        Err(_) => return Score::failed(FailureKind::ParseError, zero),
    };
    let exact = parsed.value == *gold;
    let partial = if exact {
        Ratio::from_integer(1)
    } else if elementwise {
        match (parsed.value.as_list(), gold.as_list()) {
            (Some(a), Some(g)) => partial_match(a, g),
            _ => Ratio::from_integer(0),
        }
    } else {
        Ratio::from_integer(0)
    };
    let failure_kind = if exact {
        FailureKind::None
    } else {
        match (parsed.value.as_list(), gold.as_list()) {
            (Some(a), Some(g)) if a.len() != g.len() => FailureKind::LengthMismatch,
            _ => FailureKind::WrongValue,
        }
    };
    Score {
        exact,
        partial: Some(partial),
        unresolved: parsed.resolved,
        parsed_answer: Some(parsed.value.repr()),
        failure_kind,
    }
}

fn is_key_prefixed(line: &str) -> bool {
    let b = line.as_bytes();
    b.len() >= 6
        && b[..6].iter().all(|c| matches!(c, b'0'..=b'9' | b'a'..=b'f'))
        && (b.len() == 6 || b[6] == b' ')
}

/// Normalized text for retrieval comparison: echoed line keys removed,
/// trailing whitespace trimmed per line, outer blank lines dropped.
pub fn normalize_retrieval(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let keyed = lines.iter().any(|l| !l.trim().is_empty())
        && lines.iter().filter(|l| !l.trim().is_empty()).all(|l| is_key_prefixed(l));
    let mut out: Vec<&str> = lines
        .iter()
        .map(|l| {
            let l = if keyed && is_key_prefixed(l) {
                l.get(7..).unwrap_or("")
            } else {
                l
            };
            l.trim_end()
        })
        .collect();
    while out.first().is_some_and(|l| l.is_empty()) {
        out.remove(0);
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

pub fn score_retrieval(answer: &str, gold: &str, _granularity: RetrievalGranularity) -> Score {
    let exact = normalize_retrieval(answer) == normalize_retrieval(gold);
    Score {
        exact,
        partial: None,
        unresolved: false,
        parsed_answer: None,
        failure_kind: if exact {
            FailureKind::None
        } else {
            FailureKind::WrongValue
        },
    }
}

/// Default per-call budget for execution-based grading.
pub const EXEC_TIMEOUT_MS: u64 = 5_000;

/// Grade an input-prediction answer by running the target on it.
pub fn score_input_prediction(answer: &str, instance: &TaskInstance, executor: Option<&dyn Executor>) -> Score {
    let zero = Some(Ratio::from_integer(0));
    let QueryParams::Output { output } = &instance.query else {
        return Score::failed(FailureKind::WrongValue, zero);
    };
    let Ok(expected) = parse_literal(output) else {
        return Score::failed(FailureKind::ParseError, zero);
    };
    if answer.trim().is_empty() || parse_literal(&format!("({answer},)")).is_err() {
        return Score::failed(FailureKind::ParseError, zero);
    }
    let Some(executor) = executor else {
        return Score::failed(FailureKind::Deferred, None);
    };
    let req = ExecRequest {
        id: instance.id.clone(),
        source: instance.target.source.clone(),
        args_literal: answer.to_string(),
        timeout_ms: EXEC_TIMEOUT_MS,
    };
    let resp = match executor.execute(&req) {
        Ok(r) => r,
        Err(_) => return Score::failed(FailureKind::Deferred, None),
    };
    let exact = resp.status == ExecStatus::Ok && resp.value().is_some_and(|v| v == expected.value);
    Score {
        exact,
        partial: Some(Ratio::from_integer(u64::from(exact))),
        unresolved: false,
        parsed_answer: Some(answer.trim().to_string()),
        failure_kind: if exact {
            FailureKind::None
        } else {
            FailureKind::WrongValue
        },
    }
}

/// Extract and grade a completion for any task type.
pub fn score_completion(instance: &TaskInstance, completion: &str, executor: Option<&dyn Executor>) -> Score {
    let answer = extract_answer(completion, instance.task_type);
    match instance.task_type {
        TaskType::RetrieveLine => score_retrieval(&answer, &instance.gold, RetrievalGranularity::Line),
        TaskType::RetrieveFunction => score_retrieval(&answer, &instance.gold, RetrievalGranularity::Function),
        TaskType::CruxevalIn => score_input_prediction(&answer, instance, executor),
        TaskType::CruxevalOut | TaskType::SemtraceOut => match parse_literal(&instance.gold) {
            Ok(gold) => score_prediction(&answer, &gold.value, instance.task_type),
            Err(_) => Score::failed(FailureKind::ParseError, Some(Ratio::from_integer(0))),
        },
    }
}
