//! Semantic-recall sensitivity via line removal.
//!
//! A task depends on recalling a function when removing lines from that
//! function hurts performance. For a function `C` with full-function
//! accuracy `R(C)` and incomplete variants `C'`, the sensitivity is the mean
//! normalized degradation
//!
//! ```text
//! Sens(C) = mean over C' of (R(C) - R(C')) / (R(C) + eps)
//! ```
//!
//! Variants come from removing every non-empty proper subset of body lines
//! (the signature always stays), or a size-stratified sample of them when
//! the power set is too large.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use num_rational::Ratio;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{ExecRequest, ExecStatus, Executor};
use crate::literal::parse_literal;
use crate::seed;
use crate::semtrace::SemTraceTask;
use crate::tasks::TargetSnippet;

pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const DEFAULT_CAP: usize = 4096;
/// Reporting bucket width for the removed-line fraction.
pub const BUCKET_WIDTH: f64 = 0.05;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SensitivityError {
    #[error("function {0} has fewer than 2 removable body lines")]
    TooShort(String),
    #[error("function {0} has no `def` signature line")]
    NoSignature(String),
    #[error("cap must be at least 1")]
    ZeroCap,
    #[error("no variants to average over")]
    NoVariants,
    #[error("epsilon must be positive")]
    Epsilon,
    #[error("executor failed: {0}")]
    Executor(String),
}

/// Outcome of running a variant through the interpreter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GoldOutput {
    Value { literal: String },
    Error { kind: String },
    /// Flagged: may not reproduce across runs.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncompleteVariant {
    pub id: String,
    pub parent_id: String,
    /// Indices into the removable body lines.
    pub removed_lines: Vec<usize>,
    pub source: String,
    pub removed_fraction: Ratio<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_output: Option<GoldOutput>,
}

/// Split a function into its fixed head (through the signature) and its
/// removable body lines.
fn split_function(f: &TargetSnippet) -> Result<(Vec<&str>, Vec<&str>), SensitivityError> {
    let lines: Vec<&str> = f.source.trim_end_matches('\n').split('\n').collect();
    let sig = lines
        .iter()
        .position(|l| l.trim_start().starts_with("def "))
        .ok_or_else(|| SensitivityError::NoSignature(f.id.clone()))?;
    // A signature may continue over several lines; it ends at the first
    // line whose stripped text ends with ':'.
    let end = (sig..lines.len())
        .find(|&i| lines[i].trim_end().ends_with(':'))
        .unwrap_or(sig);
    Ok((lines[..=end].to_vec(), lines[end + 1..].to_vec()))
}

pub fn removable_lines(f: &TargetSnippet) -> Result<usize, SensitivityError> {
    Ok(split_function(f)?.1.len())
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Spread `cap` draws over subset sizes `1..n` as evenly as availability
/// allows (water filling).
fn allocate(n: usize, cap: usize) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = (1..n).collect();
    let avail: Vec<u128> = sizes.iter().map(|&m| binomial(n, m)).collect();
    let mut alloc = vec![0usize; sizes.len()];
    let mut left = cap;
    loop {
        let open: Vec<usize> = (0..sizes.len()).filter(|&i| (alloc[i] as u128) < avail[i]).collect();
        if left == 0 || open.is_empty() {
            break;
        }
        let share = (left / open.len()).max(1);
        for &i in &open {
            if left == 0 {
                break;
            }
            let room = (avail[i] - alloc[i] as u128).min(share as u128) as usize;
            alloc[i] += room;
            left -= room;
        }
    }
    sizes.into_iter().zip(alloc).collect()
}

/// Enumerate (or sample) line-removed variants of `f`.
///
/// With `L` removable lines, all `2^L - 2` non-empty proper subsets are
/// produced when `L <= log2(cap)`; otherwise exactly `cap` distinct subsets, spread evenly across subset
/// sizes and drawn uniformly within each size.
pub fn enumerate_variants(f: &TargetSnippet, cap: usize, seed: u64) -> Result<Vec<IncompleteVariant>, SensitivityError> {
    if cap == 0 {
        return Err(SensitivityError::ZeroCap);
    }
    let (head, body) = split_function(f)?;
    let n = body.len();
    if n < 2 {
        return Err(SensitivityError::TooShort(f.id.clone()));
    }
    let full = n < usize::BITS as usize && (1usize << n) <= cap;
    let subsets: Vec<Vec<usize>> = if full {
        (1..(1u64 << n) - 1)
            .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect())
            .collect()
    } else {
        let mut rng = seed::rng(seed);
        let mut out = Vec::with_capacity(cap);
        for (size, count) in allocate(n, cap) {
            if count == 0 {
                continue;
            }
            let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(count);
            while seen.len() < count {
                let mut s = index::sample(&mut rng, n, size).into_vec();
                s.sort_unstable();
                if seen.insert(s.clone()) {
                    out.push(s);
                }
            }
        }
        out
    };
    Ok(subsets
        .into_iter()
        .enumerate()
        .map(|(i, removed)| {
            let gone: BTreeSet<usize> = removed.iter().copied().collect();
            let kept = body
                .iter()
                .enumerate()
                .filter(|(j, _)| !gone.contains(j))
                .map(|(_, l)| *l);
            let source: Vec<&str> = head.iter().copied().chain(kept).collect();
            IncompleteVariant {
                id: format!("{}~v{i}", f.id),
                parent_id: f.id.clone(),
                removed_fraction: Ratio::new(removed.len() as u64, n as u64),
                removed_lines: removed,
                source: source.join("\n"),
                gold_output: None,
            }
        })
        .collect())
}

/// Mean normalized degradation `(full - inc) / (full + eps)`.
pub fn sensitivity(full: f64, incomplete: &[f64], epsilon: f64) -> Result<f64, SensitivityError> {
    if incomplete.is_empty() {
        return Err(SensitivityError::NoVariants);
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(SensitivityError::Epsilon);
    }
    let total: f64 = incomplete.iter().map(|r| (full - r) / (full + epsilon)).sum();
    Ok(total / incomplete.len() as f64)
}

/// Annotate variants with what the interpreter returns for `input`.
pub fn oracle_ground_truth(
    variants: &mut [IncompleteVariant],
    input_literal: &str,
    executor: &dyn Executor,
    timeout_ms: u64,
) -> Result<(), SensitivityError> {
    for v in variants.iter_mut() {
        let req = ExecRequest {
            id: v.id.clone(),
            source: v.source.clone(),
            args_literal: input_literal.to_string(),
            timeout_ms,
        };
        let resp = executor
            .execute(&req)
            .map_err(|e| SensitivityError::Executor(e.to_string()))?;
        v.gold_output = Some(match resp.status {
            ExecStatus::Ok => GoldOutput::Value {
                literal: resp.value_literal.unwrap_or_default(),
            },
            ExecStatus::Error => GoldOutput::Error {
                kind: resp.error_kind.unwrap_or_else(|| "Error".into()),
            },
            ExecStatus::Timeout => GoldOutput::Timeout,
        });
    }
    Ok(())
}

/// Whether a variant's interpreter output still equals the full function's
/// expected output. Errors and timeouts count as wrong.
pub fn interpreter_correct(v: &IncompleteVariant, expected: &str) -> bool {
    match (&v.gold_output, parse_literal(expected)) {
        (Some(GoldOutput::Value { literal }), Ok(exp)) => {
            parse_literal(literal).is_ok_and(|got| got.value == exp.value)
        }
        _ => false,
    }
}

/// Nearest 5% bucket of a removed fraction, in percent.
pub fn bucket(fraction: Ratio<u64>) -> u32 {
    let f = *fraction.numer() as f64 / *fraction.denom() as f64;
    ((f / BUCKET_WIDTH).round() * BUCKET_WIDTH * 100.0).round() as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSensitivity {
    pub function_id: String,
    pub full_accuracy: f64,
    pub variants: usize,
    pub sens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub removed_pct: u32,
    pub mean_accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub epsilon: f64,
    pub functions: Vec<FunctionSensitivity>,
    pub buckets: Vec<BucketRow>,
}

/// One observation: accuracy of some solver on one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantScore {
    pub parent_id: String,
    pub removed_fraction: Ratio<u64>,
    pub accuracy: f64,
}

/// Per-function sensitivity plus accuracy aggregated by removed-fraction
/// bucket (the 0% bucket holds the full functions).
pub fn report(full: &BTreeMap<String, f64>, variants: &[VariantScore], epsilon: f64) -> Result<SensitivityReport, SensitivityError> {
    let mut per_fn: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut buckets: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (id, acc) in full {
        let b = buckets.entry(0).or_default();
        b.0 += acc;
        b.1 += 1;
        per_fn.entry(id).or_default();
    }
    for v in variants {
        per_fn.entry(&v.parent_id).or_default().push(v.accuracy);
        let b = buckets.entry(bucket(v.removed_fraction)).or_default();
        b.0 += v.accuracy;
        b.1 += 1;
    }
    let mut functions = Vec::new();
    for (id, accs) in per_fn {
        let Some(&full_acc) = full.get(id) else { continue };
        if accs.is_empty() {
            continue;
        }
        functions.push(FunctionSensitivity {
            function_id: id.to_string(),
            full_accuracy: full_acc,
            variants: accs.len(),
            sens: sensitivity(full_acc, &accs, epsilon)?,
        });
    }
    Ok(SensitivityReport {
        epsilon,
        functions,
        buckets: buckets
            .into_iter()
            .map(|(removed_pct, (sum, n))| BucketRow {
                removed_pct,
                mean_accuracy: sum / n as f64,
                n,
            })
            .collect(),
    })
}

/// Closed-form accuracy of a SemTrace function with `m` of its `k`
/// assignment lines removed, averaged over which lines go.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub k: usize,
    pub m: usize,
    /// `m` over all body lines (initializer + `k` assignments + return).
    pub removed_fraction: Ratio<u64>,
    pub exact: Ratio<u64>,
    pub partial: Ratio<u64>,
    pub tasks: usize,
}

/// Expected exact/partial accuracy when `m` assignment lines are removed
/// uniformly at random and the interpreter's output is scored against the
/// complete function's output.
///
/// A removed slot keeps its initial 0, so it still matches when the
/// expected value happens to be 0. With `z` such zero slots:
/// `partial = (k - m + m z / k) / k` and `exact = C(z, m) / C(k, m)`. When no
/// expected value is 0 this is `partial = (k - m) / k`, `exact = [m = 0]`.
pub fn semtrace_removal_curve(tasks: &[SemTraceTask]) -> Vec<RemovalRow> {
    let mut acc: BTreeMap<(usize, usize), (Ratio<u64>, Ratio<u64>, usize)> = BTreeMap::new();
    for t in tasks {
        let k = t.k;
        let z = t.expected.iter().filter(|v| **v == 0).count();
        for m in 0..=k {
            let kk = k as u64;
            let mm = m as u64;
            let partial = Ratio::new(kk * kk - mm * kk + mm * z as u64, kk * kk);
            let exact = if m <= z {
                Ratio::new(binomial(z, m) as u64, binomial(k, m) as u64)
            } else {
                Ratio::from_integer(0)
            };
            let e = acc
                .entry((k, m))
                .or_insert((Ratio::from_integer(0), Ratio::from_integer(0), 0));
            e.0 += exact;
            e.1 += partial;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|((k, m), (exact, partial, n))| {
            let n_r = Ratio::from_integer(n as u64);
            RemovalRow {
                k,
                m,
                removed_fraction: Ratio::new(m as u64, k as u64 + 2),
                exact: exact / n_r,
                partial: partial / n_r,
                tasks: n,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::SemTraceInterpreter;
    use crate::semtrace::fixtures::{listing_task, LISTING_SOURCE};
    use crate::semtrace::{render, Assignment};

    fn listing() -> TargetSnippet {
        TargetSnippet::from_semtrace(&listing_task())
    }

    #[test]
    fn variant_counts() {
        let three = TargetSnippet::new("t", "def f(x):\n    a = 1\n    b = 2\n    return a");
        assert_eq!(enumerate_variants(&three, 8, 0).unwrap().len(), 6);
        assert_eq!(enumerate_variants(&listing(), 4096, 0).unwrap().len(), 62);

        let body: String = (0..20).map(|i| format!("\n    v{i} = {i}")).collect();
        let big = TargetSnippet::new("big", format!("def f(x):{body}"));
        let a = enumerate_variants(&big, 4096, 7).unwrap();
        assert_eq!(a.len(), 4096);
        assert_eq!(a, enumerate_variants(&big, 4096, 7).unwrap());
        let distinct: HashSet<_> = a.iter().map(|v| v.removed_lines.clone()).collect();
        assert_eq!(distinct.len(), 4096);
        let sizes: BTreeSet<usize> = a.iter().map(|v| v.removed_lines.len()).collect();
        assert_eq!(sizes, (1..20).collect());
    }

    #[test]
    fn variants_keep_signature_and_indentation() {
        for v in enumerate_variants(&listing(), 4096, 0).unwrap() {
            assert!(v.source.starts_with("def f(x):"));
            assert!(!v.removed_lines.is_empty() && v.removed_lines.len() < 6);
            for line in v.source.lines().skip(1) {
                assert!(LISTING_SOURCE.lines().any(|l| l == line));
            }
            assert_eq!(v.removed_fraction, Ratio::new(v.removed_lines.len() as u64, 6));
        }
    }

    #[test]
    fn single_line_body_rejected() {
        let f = TargetSnippet::new("s", "def f(x):\n    return x");
        assert_eq!(enumerate_variants(&f, 10, 0), Err(SensitivityError::TooShort("s".into())));
    }

    #[test]
    fn sensitivity_formula() {
        let s = sensitivity(1.0, &[0.0; 5], 1e-9).unwrap();
        assert_eq!(s, 1.0 / (1.0 + 1e-9));
        assert_eq!(sensitivity(0.7, &[0.7, 0.7], 1e-9).unwrap(), 0.0);
        let s = sensitivity(0.8, &[0.8, 0.4, 0.0], 1e-15).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        assert_eq!(sensitivity(1.0, &[], 1e-9), Err(SensitivityError::NoVariants));
        assert_eq!(sensitivity(1.0, &[1.0], 0.0), Err(SensitivityError::Epsilon));
    }

    #[test]
    fn sensitivity_is_permutation_invariant() {
        let a = sensitivity(0.9, &[0.1, 0.5, 0.3, 0.9], 1e-9).unwrap();
        let b = sensitivity(0.9, &[0.9, 0.3, 0.1, 0.5], 1e-9).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn oracle_annotations() {
        let mut vs = enumerate_variants(&listing(), 4096, 0).unwrap();
        oracle_ground_truth(&mut vs, "81", &SemTraceInterpreter, 1000).unwrap();
        let find = |pred: &dyn Fn(&str) -> bool| vs.iter().find(|v| pred(&v.source)).unwrap().clone();
        let no_88 = find(&|s| !s.contains("x + 88") && s.lines().count() == 6);
        assert_eq!(
            no_88.gold_output,
            Some(GoldOutput::Value {
                literal: "[38, 0, 16, 7]".into()
            })
        );
        let no_ret = find(&|s| !s.contains("return") && s.lines().count() == 6);
        assert_eq!(no_ret.gold_output, Some(GoldOutput::Value { literal: "None".into() }));
        let no_init = find(&|s| !s.contains("arr = [") && s.lines().count() == 6);
        assert_eq!(no_init.gold_output, Some(GoldOutput::Error { kind: "NameError".into() }));
        assert!(!interpreter_correct(&no_88, "[38, 169, 16, 7]"));
    }

    #[test]
    fn removal_curve_closed_form() {
        let rows = semtrace_removal_curve(&[listing_task()]);
        let row = |m| rows.iter().find(|r| r.m == m).unwrap();
        assert_eq!((row(0).exact, row(0).partial), (Ratio::from_integer(1), Ratio::from_integer(1)));
        assert_eq!((row(1).exact, row(1).partial), (Ratio::from_integer(0), Ratio::new(3, 4)));
        assert_eq!(row(4).partial, Ratio::from_integer(0));

        // A zero-valued slot survives removal.
        let a = |index, offset| Assignment { index, offset };
        let t = SemTraceTask::new(0, 2, 10, vec![a(0, -10), a(1, 1), a(2, 2), a(3, 3)]).unwrap();
        let rows = semtrace_removal_curve(&[t]);
        let last = rows.iter().find(|r| r.m == 4).unwrap();
        assert_eq!(last.partial, Ratio::new(1, 4));
        assert_eq!(rows.iter().find(|r| r.m == 1).unwrap().exact, Ratio::new(1, 4));
    }

    #[test]
    fn report_buckets() {
        let full: BTreeMap<String, f64> = [("a".to_string(), 1.0)].into();
        let vs = vec![
            VariantScore {
                parent_id: "a".into(),
                removed_fraction: Ratio::new(1, 6),
                accuracy: 0.0,
            },
            VariantScore {
                parent_id: "a".into(),
                removed_fraction: Ratio::new(1, 5),
                accuracy: 1.0,
            },
        ];
        let r = report(&full, &vs, DEFAULT_EPSILON).unwrap();
        assert_eq!(r.functions.len(), 1);
        assert!((r.functions[0].sens - 0.5).abs() < 1e-8);
        let pcts: Vec<u32> = r.buckets.iter().map(|b| b.removed_pct).collect();
        assert_eq!(pcts, vec![0, 15, 20]);
        assert_eq!(bucket(Ratio::new(1, 6)), 15);
        let _ = render(&listing_task());
    }
}
