//! Positional accuracy curves, lost-in-the-middle summaries and export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::DecayFit;
use crate::record::EvalRecord;
use crate::tasks::TaskType;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty curve")]
    EmptyCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalCurve {
    pub model: String,
    pub task_type: TaskType,
    pub distractor_count: usize,
    pub accuracy_by_position: Vec<Cell>,
    pub relative_by_position: Vec<f64>,
    /// Mean partial-match score, for tasks that have one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_by_position: Option<Vec<Cell>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_relative_by_position: Option<Vec<f64>>,
}

/// Divide by the maximum. An all-zero curve stays all zero.
pub fn relative(means: &[f64]) -> Vec<f64> {
    let max = means.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        means.iter().map(|m| m / max).collect()
    } else {
        vec![0.0; means.len()]
    }
}

/// First position attaining the maximum mean.
pub fn argmax(means: &[f64]) -> Option<usize> {
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    means.iter().position(|&m| m == max)
}

fn cells(sums: &[(f64, usize)]) -> Vec<Cell> {
    sums.iter()
        .map(|&(s, n)| Cell {
            mean: if n == 0 { 0.0 } else { s / n as f64 },
            n,
        })
        .collect()
}

/// Unweighted mean accuracy per (model, task, distractor count, position).
///
/// When an instance appears more than once (a failed call retried on
/// resume), its last graded record wins. Ungraded records are ignored.
/// The result is independent of record order apart from that rule, and
/// curves come out sorted by (model, task, count).
pub fn aggregate(records: &[EvalRecord]) -> Vec<PositionalCurve> {
    let mut latest: BTreeMap<(&str, &str), &EvalRecord> = BTreeMap::new();
    for r in records {
        if r.score.is_some() {
            latest.insert((&r.model, &r.instance_id), r);
        }
    }
    type Key<'a> = (&'a str, TaskType, usize);
    struct Acc {
        exact: Vec<(f64, usize)>,
        partial: Vec<(f64, usize)>,
        has_partial: bool,
    }
    let mut groups: BTreeMap<Key, Acc> = BTreeMap::new();
    for r in latest.values() {
        let score = r.score.as_ref().expect("filtered above");
        let acc = groups.entry((&r.model, r.task_type, r.distractor_count)).or_insert_with(|| Acc {
            exact: Vec::new(),
            partial: Vec::new(),
            has_partial: false,
        });
        let width = r.positions.max(r.position_index + 1);
        if acc.exact.len() < width {
            acc.exact.resize(width, (0.0, 0));
            acc.partial.resize(width, (0.0, 0));
        }
        let e = &mut acc.exact[r.position_index];
        e.0 += f64::from(u8::from(score.exact));
        e.1 += 1;
        if let Some(p) = score.partial_f64() {
            acc.has_partial = true;
            let c = &mut acc.partial[r.position_index];
            c.0 += p;
            c.1 += 1;
        }
    }
    groups
        .into_iter()
        .map(|((model, task_type, distractor_count), acc)| {
            let exact = cells(&acc.exact);
            let rel = relative(&exact.iter().map(|c| c.mean).collect::<Vec<_>>());
            let partial = acc.has_partial.then(|| cells(&acc.partial));
            let partial_rel = partial
                .as_ref()
                .map(|p| relative(&p.iter().map(|c| c.mean).collect::<Vec<_>>()));
            PositionalCurve {
                model: model.to_string(),
                task_type,
                distractor_count,
                accuracy_by_position: exact,
                relative_by_position: rel,
                partial_by_position: partial,
                partial_relative_by_position: partial_rel,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimStats {
    pub max: f64,
    pub min: f64,
    /// `max - min`, in percentage points.
    pub drop_pp: f64,
    /// `(max - min) / max`, in percent; `None` when `max` is 0.
    pub drop_rel: Option<f64>,
}

impl LimStats {
    pub fn drop_rel_undefined(&self) -> bool {
        self.drop_rel.is_none()
    }
}

/// Spread between the best and worst position of a curve.
pub fn lim_stats(means: &[f64]) -> Result<LimStats, AnalysisError> {
    if means.is_empty() {
        return Err(AnalysisError::EmptyCurve);
    }
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LimStats {
        max,
        min,
        drop_pp: (max - min) * 100.0,
        drop_rel: (max > 0.0).then(|| (max - min) / max * 100.0),
    })
}

pub fn curve_lim_stats(curve: &PositionalCurve) -> Result<LimStats, AnalysisError> {
    lim_stats(&curve.accuracy_by_position.iter().map(|c| c.mean).collect::<Vec<_>>())
}

/// Column order of curve CSV files.
pub const CURVE_HEADER: [&str; 9] = [
    "model",
    "task",
    "distractor_count",
    "position_index",
    "positions",
    "metric",
    "mean",
    "relative",
    "n",
];

#[derive(Serialize)]
struct CurveRow<'a> {
    model: &'a str,
    task: &'a str,
    distractor_count: usize,
    position_index: usize,
    positions: usize,
    metric: &'a str,
    mean: f64,
    relative: f64,
    n: usize,
}

/// Column order of fit CSV files: one row per parameter, then one per
/// fitted x value.
pub const FIT_HEADER: [&str; 7] = ["label", "model_form", "row", "x", "estimate", "ci_lo", "ci_hi"];

#[derive(Serialize)]
struct FitRow<'a> {
    label: &'a str,
    model_form: &'a str,
    row: &'a str,
    x: Option<f64>,
    estimate: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

fn create(path: &Path) -> Result<File, AnalysisError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| AnalysisError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map_err(|source| AnalysisError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>, AnalysisError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(header)?;
    Ok(w)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// `{model}_{task}_{count}.csv`
pub fn curve_file_name(curve: &PositionalCurve) -> String {
    format!(
        "{}_{}_{}.csv",
        sanitize(&curve.model),
        curve.task_type,
        curve.distractor_count
    )
}

fn write_curve_rows(w: &mut csv::Writer<File>, c: &PositionalCurve) -> Result<(), AnalysisError> {
    let positions = c.accuracy_by_position.len();
    let mut emit = |metric: &str, cells: &[Cell], rel: &[f64]| -> Result<(), AnalysisError> {
        for (i, (cell, r)) in cells.iter().zip(rel).enumerate() {
            w.serialize(CurveRow {
                model: &c.model,
                task: c.task_type.as_str(),
                distractor_count: c.distractor_count,
                position_index: i,
                positions,
                metric,
                mean: cell.mean,
                relative: *r,
                n: cell.n,
            })?;
        }
        Ok(())
    };
    emit("exact", &c.accuracy_by_position, &c.relative_by_position)?;
    if let (Some(p), Some(r)) = (&c.partial_by_position, &c.partial_relative_by_position) {
        emit("partial", p, r)?;
    }
    Ok(())
}

/// Write every curve to `dir/{model}_{task}_{count}.csv` plus all of them
/// to `dir/curves.csv`; the combined file is header-only when there are no
/// curves.
pub fn export_curves_csv(curves: &[PositionalCurve], dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let mut written = Vec::new();
    let all_path = dir.join("curves.csv");
    let mut all = csv_writer(&all_path, &CURVE_HEADER)?;
    for c in curves {
        write_curve_rows(&mut all, c)?;
        let path = dir.join(curve_file_name(c));
        let mut w = csv_writer(&path, &CURVE_HEADER)?;
        write_curve_rows(&mut w, c)?;
        w.flush().map_err(csv::Error::from)?;
        written.push(path);
    }
    all.flush().map_err(csv::Error::from)?;
    written.insert(0, all_path);
    Ok(written)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), AnalysisError> {
    let mut w = BufWriter::new(create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|source| AnalysisError::Write {
            path: path.to_path_buf(),
            source,
        })?;
    }
    w.flush().map_err(|source| AnalysisError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Labelled fits as a flat table.
pub fn export_fits_csv(fits: &[(String, DecayFit)], path: &Path) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path, &FIT_HEADER)?;
    for (label, fit) in fits {
        let p = fit.params;
        let ci = fit.ci.as_ref();
        let params = [
            ("a", p.a, ci.map(|c| c.a)),
            ("b", p.b, ci.map(|c| c.b)),
            ("c", p.c, ci.map(|c| c.c)),
        ];
        for (name, est, iv) in params {
            w.serialize(FitRow {
                label,
                model_form: &fit.model_form,
                row: name,
                x: None,
                estimate: est,
                ci_lo: iv.map(|i| i.lo),
                ci_hi: iv.map(|i| i.hi),
            })?;
        }
        w.serialize(FitRow {
            label,
            model_form: &fit.model_form,
            row: "residual_norm",
            x: None,
            estimate: fit.residual_norm,
            ci_lo: None,
            ci_hi: None,
        })?;
        if let Some(ci) = ci {
            for (x, iv) in &ci.points {
                w.serialize(FitRow {
                    label,
                    model_form: &fit.model_form,
                    row: "fitted",
                    x: Some(*x),
                    estimate: p.eval(*x),
                    ci_lo: Some(iv.lo),
                    ci_hi: Some(iv.hi),
                })?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
