//! SemTrace task generation.
//!
//! A SemTrace function takes an integer `x`, initializes a zero list of
//! length `k`, assigns every slot exactly once with `arr[i] = x ± y` in a
//! random order, and returns the list:
//!
//! ```python
//! def f(x):
//!     arr = [0, 0, 0, 0]
//!     arr[0] = x - 43
//!     arr[2] = x - 65
//!     arr[1] = x + 88
//!     arr[3] = x - 74
//!     return arr
//! ```
//!
//! Each slot depends on exactly one line, so a wrong element in a predicted
//! output points at a specific statement that was not recalled.
//!
//! Sampling for `d` digits: `k ~ U[4, 10]`, `x ~ U[0, 10^d - 1]`,
//! offsets `y ~ U[-10^d, 10^d - 1]`, line order a uniform permutation.

use num_bigint::BigUint;
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const MIN_DIGITS: u32 = 2;
pub const MAX_DIGITS: u32 = 6;
pub const MIN_K: usize = 4;
pub const MAX_K: usize = 10;
/// Default dataset size.
pub const DEFAULT_COUNT: usize = 800;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SemTraceError {
    #[error("digits must be in [{MIN_DIGITS}, {MAX_DIGITS}], got {0}")]
    Digits(u32),
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("line {line}: {detail}")]
    Source { line: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub index: usize,
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemTraceTask {
    pub seed: u64,
    pub digits: u32,
    pub x: i64,
    pub k: usize,
    /// In source-line order.
    #[serde(with = "pairs")]
    pub assignments: Vec<Assignment>,
    pub expected: Vec<i64>,
}

mod pairs {
    use super::Assignment;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &[Assignment], s: S) -> Result<S::Ok, S::Error> {
        a.iter()
            .map(|a| (a.index, a.offset))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Assignment>, D::Error> {
        let raw = Vec::<(usize, i64)>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|(index, offset)| Assignment { index, offset })
            .collect())
    }
}

/// `10^d`.
pub fn scale(digits: u32) -> i64 {
    10i64.pow(digits)
}

fn check_digits(digits: u32) -> Result<(), SemTraceError> {
    if (MIN_DIGITS..=MAX_DIGITS).contains(&digits) {
        Ok(())
    } else {
        Err(SemTraceError::Digits(digits))
    }
}

/// Sample one task. Deterministic in `(seed, digits)`.
pub fn generate(seed: u64, digits: u32) -> Result<SemTraceTask, SemTraceError> {
    check_digits(digits)?;
    let mut rng = seed::rng(seed);
    let s = scale(digits);
    let k = rng.gen_range(MIN_K..=MAX_K);
    let x = rng.gen_range(0..s);
    let offsets: Vec<i64> = (0..k).map(|_| rng.gen_range(-s..s)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let assignments = order
        .into_iter()
        .map(|index| Assignment {
            index,
            offset: offsets[index],
        })
        .collect();
    SemTraceTask::new(seed, digits, x, assignments)
}

/// `count` tasks with seeds derived from `base_seed`.
pub fn generate_many(base_seed: u64, digits: u32, count: usize) -> Result<Vec<SemTraceTask>, SemTraceError> {
    (0..count as u64)
        .map(|i| generate(seed::derive(base_seed, &[i]), digits))
        .collect()
}

impl SemTraceTask {
    /// Build and validate a task from explicit parts.
    pub fn new(seed: u64, digits: u32, x: i64, assignments: Vec<Assignment>) -> Result<Self, SemTraceError> {
        let mut task = Self {
            seed,
            digits,
            x,
            k: assignments.len(),
            assignments,
            expected: Vec::new(),
        };
        task.expected = oracle(&task);
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), SemTraceError> {
        check_digits(self.digits)?;
        let invalid = |m: String| Err(SemTraceError::Invalid(m));
        if !(MIN_K..=MAX_K).contains(&self.k) {
            return invalid(format!("k = {} outside [{MIN_K}, {MAX_K}]", self.k));
        }
        if self.assignments.len() != self.k {
            return invalid(format!("{} assignments for k = {}", self.assignments.len(), self.k));
        }
        let mut seen = vec![false; self.k];
        let s = scale(self.digits);
        for a in &self.assignments {
            if a.index >= self.k || std::mem::replace(&mut seen[a.index], true) {
                return invalid(format!("index {} repeated or out of range", a.index));
            }
            if !(-s..s).contains(&a.offset) {
                return invalid(format!("offset {} outside [{}, {}]", a.offset, -s, s - 1));
            }
        }
        if self.expected != oracle(self) {
            return invalid("expected output disagrees with the assignments".into());
        }
        Ok(())
    }

    /// Expected output as the Python literal `[a, b, ...]`.
    pub fn expected_literal(&self) -> String {
        format_int_list(&self.expected)
    }
}

pub fn format_int_list(values: &[i64]) -> String {
    let parts: Vec<String> = values.iter().map(i64::to_string).collect();
    format!("[{}]", parts.join(", "))
}

/// Ground-truth output: `expected[i] = x + y_i`.
pub fn oracle(task: &SemTraceTask) -> Vec<i64> {
    let mut out = vec![0; task.assignments.len()];
    for a in &task.assignments {
        if let Some(slot) = out.get_mut(a.index) {
            *slot = task.x + a.offset;
        }
    }
    out
}

pub const SIGNATURE: &str = "def f(x):";
const INDENT: &str = "    ";

fn assignment_line(a: &Assignment) -> String {
    if a.offset >= 0 {
        format!("{INDENT}arr[{}] = x + {}", a.index, a.offset)
    } else {
        format!("{INDENT}arr[{}] = x - {}", a.index, a.offset.unsigned_abs())
    }
}

/// One line of a task file: the task, its source and its input/output
/// pair, in the `{id, code, input, output}` shape used for target lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub code: String,
    pub input: String,
    pub output: String,
    pub task: SemTraceTask,
}

impl TaskRecord {
    pub fn new(task: &SemTraceTask) -> Self {
        Self {
            id: task_id(task),
            code: render(task),
            input: task.x.to_string(),
            output: task.expected_literal(),
            task: task.clone(),
        }
    }
}

pub fn task_id(task: &SemTraceTask) -> String {
    format!("semtrace-d{}-{}", task.digits, task.seed)
}

/// Python source for the task, `k + 3` lines, no trailing newline.
pub fn render(task: &SemTraceTask) -> String {
    let zeros = vec!["0"; task.k].join(", ");
    let mut lines = Vec::with_capacity(task.k + 3);
    lines.push(SIGNATURE.to_string());
    lines.push(format!("{INDENT}arr = [{zeros}]"));
    lines.extend(task.assignments.iter().map(assignment_line));
    lines.push(format!("{INDENT}return arr"));
    lines.join("\n")
}

/// One statement of a (possibly line-removed) SemTrace function body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statement {
    Init { len: usize },
    Assign(Assignment),
    Return,
}

/// Parse rendered SemTrace source (or a line-removed variant of it) back
/// into its statements. Blank lines are skipped.
pub fn parse_source(source: &str) -> Result<Vec<Statement>, SemTraceError> {
    let mut lines = source.lines().enumerate();
    let bad = |line: usize, detail: &str| SemTraceError::Source {
        line: line + 1,
        detail: detail.to_string(),
    };
    match lines.next() {
        Some((_, l)) if l.trim_end() == SIGNATURE => {}
        _ => return Err(bad(0, "expected `def f(x):`")),
    }
    let mut out = Vec::new();
    for (n, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !raw.starts_with(INDENT) {
            return Err(bad(n, "statement outside the function body"));
        }
        if line == "return arr" {
            out.push(Statement::Return);
        } else if let Some(rest) = line.strip_prefix("arr = [").and_then(|r| r.strip_suffix(']')) {
            let zeros: Vec<&str> = rest.split(',').map(str::trim).collect();
            if rest.trim().is_empty() || zeros.iter().any(|z| *z != "0") {
                return Err(bad(n, "initializer must be a list of zeros"));
            }
            out.push(Statement::Init { len: zeros.len() });
        } else if let Some(rest) = line.strip_prefix("arr[") {
            let (idx, rhs) = rest.split_once("] = x ").ok_or_else(|| bad(n, "malformed assignment"))?;
            let index = idx.parse().map_err(|_| bad(n, "bad index"))?;
            let (sign, mag) = rhs.split_at(1);
            let mag: i64 = mag.trim().parse().map_err(|_| bad(n, "bad offset"))?;
            let offset = match sign {
                "+" => mag,
                "-" => -mag,
                _ => return Err(bad(n, "expected `+` or `-`")),
            };
            out.push(Statement::Assign(Assignment { index, offset }));
        } else {
            return Err(bad(n, "unrecognized statement"));
        }
    }
    Ok(out)
}

/// Probability of guessing the whole output at random: `(1 / (2 * 10^d))^k`.
pub fn guess_probability(task: &SemTraceTask) -> Ratio<BigUint> {
    guess_probability_for(task.digits, task.k)
}

pub fn guess_probability_for(digits: u32, k: usize) -> Ratio<BigUint> {
    let choices = BigUint::from(2u32) * BigUint::from(10u32).pow(digits);
    Ratio::new(BigUint::from(1u32), choices.pow(k as u32))
}
