//! `recallbench` command-line interface.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use recallbench::analysis::{self, aggregate, curve_lim_stats, write_jsonl};
use recallbench::exec::{Executor, SemTraceInterpreter, SubprocessExecutor};
use recallbench::fit::{self, DecayFit};
use recallbench::record::EvalRecord;
use recallbench::runner::{self, RunConfig, RunError, RECORDS_FILE};
use recallbench::semtrace::{self, TaskRecord};
use recallbench::sensitivity::{self, IncompleteVariant, VariantScore};
use recallbench::tasks::TargetSnippet;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "recallbench", version, about = "Positional code-recall benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate SemTrace tasks as JSONL.
    Gen {
        #[arg(long, default_value_t = 2)]
        digits: u32,
        #[arg(long, default_value_t = semtrace::DEFAULT_COUNT)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the task instances of a run configuration without running it.
    Assemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute or resume a run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Re-grade a run's records with the current scoring rules.
    Rescore {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/records.rescored.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Command starting an execution worker, for input prediction.
        #[arg(long)]
        executor: Option<String>,
    },
    /// Enumerate line-removed variants, annotate them with interpreter
    /// output, and compute sensitivity.
    Sensitivity {
        /// Target list (`{id, code, input, output}` JSONL).
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = sensitivity::DEFAULT_CAP)]
        cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Execution worker command; the built-in SemTrace interpreter is
        /// used when omitted.
        #[arg(long)]
        executor: Option<String>,
        #[arg(long, default_value_t = sensitivity::DEFAULT_EPSILON)]
        epsilon: f64,
        /// Run directory holding model answers on the complete targets.
        #[arg(long, requires = "variant_run")]
        full_run: Option<PathBuf>,
        /// Run directory holding model answers on the variants.
        #[arg(long)]
        variant_run: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Positional curves, drop statistics and decay fits.
    Analyze {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        fit: Option<FitKind>,
        /// Variant file from `sensitivity`; fit accuracy against the
        /// removed-line fraction instead of position.
        #[arg(long)]
        variants: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Human-readable accuracy tables.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FitKind {
    Exp,
}

/// Failure classes with distinct exit codes.
enum Failure {
    /// Bad configuration or missing inputs (exit 2).
    Config(String),
    /// Anything else (exit 1).
    Other(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn need(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{} does not exist", path.display())))
    }
}

fn emit_jsonl<T: Serialize>(items: &[T], out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => write_jsonl(items, path).map_err(other),
        None => {
            let mut stdout = std::io::stdout().lock();
            for item in items {
                serde_json::to_writer(&mut stdout, item).map_err(other)?;
                stdout.write_all(b"\n").map_err(other)?;
            }
            Ok(())
        }
    }
}

fn executor(cmd: Option<&str>) -> Result<Option<SubprocessExecutor>, Failure> {
    cmd.map(SubprocessExecutor::from_command_line)
        .transpose()
        .map_err(|e| Failure::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode, Failure> {
    match cmd {
        Command::Gen {
            digits,
            count,
            seed,
            out,
        } => {
            let tasks = semtrace::generate_many(seed, digits, count).map_err(|e| Failure::Config(e.to_string()))?;
            let records: Vec<TaskRecord> = tasks.iter().map(TaskRecord::new).collect();
            emit_jsonl(&records, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Assemble { config, out } => {
            need(&config)?;
            let cfg = RunConfig::load(&config)?;
            let instances = runner::build_instances(&cfg)?;
            emit_jsonl(&instances, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, output_dir } => {
            need(&config)?;
            let mut cfg = RunConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let summary = runner::run(&cfg)?;
            let curves = runner::curves_for(&cfg.output_dir)?;
            print!("{}", runner::report_text(&curves));
            println!(
                "{}: {} instances, {} skipped, {} completed, {} failed; tokens in/out {}/{}{}",
                summary.run_id,
                summary.instances,
                summary.skipped,
                summary.completed,
                summary.failed,
                summary.usage.prompt_tokens,
                summary.usage.completion_tokens,
                if summary.estimated_usage_calls > 0 {
                    format!(" ({} calls estimated)", summary.estimated_usage_calls)
                } else {
                    String::new()
                }
            );
            Ok(if summary.is_complete() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Rescore {
            run_dir,
            out,
            executor: cmd,
        } => {
            need(&run_dir.join(RECORDS_FILE))?;
            let exec = executor(cmd.as_deref())?;
            let out = out.unwrap_or_else(|| run_dir.join("records.rescored.jsonl"));
            let s = runner::rescore(&run_dir, &out, exec.as_ref().map(|e| e as &dyn Executor))?;
            println!(
                "rescored {} of {} records ({} changed) -> {}",
                s.rescored,
                s.records,
                s.changed,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sensitivity {
            targets,
            cap,
            seed,
            executor: cmd,
            epsilon,
            full_run,
            variant_run,
            out_dir,
        } => {
            need(&targets)?;
            let exec = executor(cmd.as_deref())?;
            let exec: &dyn Executor = match &exec {
                Some(e) => e,
                None => &SemTraceInterpreter,
            };
            sensitivity_cmd(&targets, cap, seed, exec, epsilon, full_run.as_deref(), variant_run.as_deref(), &out_dir)
        }
        Command::Analyze {
            run_dir,
            out_dir,
            fit,
            variants,
            bootstrap,
            seed,
        } => {
            need(&run_dir.join(RECORDS_FILE))?;
            let out_dir = out_dir.unwrap_or_else(|| run_dir.join("analysis"));
            analyze_cmd(&run_dir, &out_dir, fit.is_some(), variants.as_deref(), bootstrap, seed)
        }
        Command::Report { run_dir } => {
            need(&run_dir.join(RECORDS_FILE))?;
            print!("{}", runner::report_text(&runner::curves_for(&run_dir)?));
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Exact-match rate per target (or variant) id.
fn accuracy_by_target(records: &[EvalRecord]) -> BTreeMap<String, (f64, usize)> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(s) = &r.score {
            let e = acc.entry(r.target_id.clone()).or_default();
            e.0 += f64::from(u8::from(s.exact));
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
}

#[derive(Serialize)]
struct SensitivityRow {
    removed_fraction: f64,
    mean_accuracy: f64,
    n: usize,
}

fn write_sensitivity(report: &sensitivity::SensitivityReport, dir: &Path, stem: &str) -> Result<(), Failure> {
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report).map_err(other)?).map_err(other)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv"))).map_err(other)?;
    if report.buckets.is_empty() {
        w.write_record(["removed_fraction", "mean_accuracy", "n"]).map_err(other)?;
    }
    for b in &report.buckets {
        w.serialize(SensitivityRow {
            removed_fraction: f64::from(b.removed_pct) / 100.0,
            mean_accuracy: b.mean_accuracy,
            n: b.n,
        })
        .map_err(other)?;
    }
    w.flush().map_err(other)
}

#[allow(clippy::too_many_arguments)]
fn sensitivity_cmd(
    targets: &Path,
    cap: usize,
    seed: u64,
    exec: &dyn Executor,
    epsilon: f64,
    full_run: Option<&Path>,
    variant_run: Option<&Path>,
    out_dir: &Path,
) -> Result<ExitCode, Failure> {
    let targets_path = targets;
    let targets: Vec<TargetSnippet> = runner::read_jsonl(targets)?;
    fs::create_dir_all(out_dir).map_err(other)?;
    let mut variants: Vec<IncompleteVariant> = Vec::new();
    let mut skipped = 0;
    for t in &targets {
        let Some(input) = &t.input else {
            return Err(Failure::Config(format!("target {} has no input", t.id)));
        };
        match sensitivity::enumerate_variants(t, cap, recallbench::seed::derive(seed, &[recallbench::seed::hash_str(&t.id)])) {
            Ok(mut vs) => {
                sensitivity::oracle_ground_truth(&mut vs, input, exec, 5_000).map_err(other)?;
                variants.extend(vs);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", t.id);
                skipped += 1;
            }
        }
    }
    write_jsonl(&variants, &out_dir.join("variants.jsonl")).map_err(other)?;
    let settings = serde_json::json!({
        "cap": cap,
        "seed": seed,
        "epsilon": epsilon,
        "enumeration": "all 2^L - 2 non-empty proper subsets of the L body lines when 2^L <= cap; \
                        otherwise cap distinct subsets spread evenly over sizes 1..L-1, uniform within a size",
    });
    fs::write(out_dir.join("settings.json"), serde_json::to_string_pretty(&settings).map_err(other)?).map_err(other)?;

    // Variants whose interpreter output is a value become new targets for
    // a model run.
    let by_id: HashMap<&str, &TargetSnippet> = targets.iter().map(|t| (t.id.as_str(), t)).collect();
    let variant_targets: Vec<TargetSnippet> = variants
        .iter()
        .filter_map(|v| match &v.gold_output {
            Some(sensitivity::GoldOutput::Value { literal }) => {
                let parent = by_id.get(v.parent_id.as_str())?;
                Some(TargetSnippet::new(&v.id, &v.source).with_io(parent.input.clone()?, literal.clone()))
            }
            _ => None,
        })
        .collect();
    write_jsonl(&variant_targets, &out_dir.join("variant_targets.jsonl")).map_err(other)?;

    // How often the incomplete function still produces the complete
    // function's output: the interpreter's own sensitivity.
    let full: BTreeMap<String, f64> = targets
        .iter()
        .filter(|t| variants.iter().any(|v| v.parent_id == t.id))
        .map(|t| (t.id.clone(), 1.0))
        .collect();
    let scores: Vec<VariantScore> = variants
        .iter()
        .filter_map(|v| {
            let expected = by_id.get(v.parent_id.as_str())?.output.as_deref()?;
            Some(VariantScore {
                parent_id: v.parent_id.clone(),
                removed_fraction: v.removed_fraction,
                accuracy: f64::from(u8::from(sensitivity::interpreter_correct(v, expected))),
            })
        })
        .collect();
    let report = sensitivity::report(&full, &scores, epsilon).map_err(other)?;
    write_sensitivity(&report, out_dir, "interpreter_sensitivity")?;

    // SemTrace task files also get the closed-form removal curve.
    if let Ok(records) = runner::read_jsonl::<TaskRecord>(targets_path) {
        let tasks: Vec<semtrace::SemTraceTask> = records.into_iter().map(|r| r.task).collect();
        let rows = sensitivity::semtrace_removal_curve(&tasks);
        write_jsonl(&rows, &out_dir.join("semtrace_removal_curve.jsonl")).map_err(other)?;
    }

    if let (Some(full_dir), Some(var_dir)) = (full_run, variant_run) {
        let full_acc = accuracy_by_target(&runner::read_jsonl(&full_dir.join(RECORDS_FILE))?);
        let var_acc = accuracy_by_target(&runner::read_jsonl(&var_dir.join(RECORDS_FILE))?);
        let parents: HashMap<&str, &IncompleteVariant> = variants.iter().map(|v| (v.id.as_str(), v)).collect();
        let full: BTreeMap<String, f64> = full_acc.into_iter().map(|(k, (a, _))| (k, a)).collect();
        let scores: Vec<VariantScore> = var_acc
            .into_iter()
            .filter_map(|(id, (acc, _))| {
                let v = parents.get(id.as_str())?;
                Some(VariantScore {
                    parent_id: v.parent_id.clone(),
                    removed_fraction: v.removed_fraction,
                    accuracy: acc,
                })
            })
            .collect();
        let report = sensitivity::report(&full, &scores, epsilon).map_err(other)?;
        write_sensitivity(&report, out_dir, "model_sensitivity")?;
        let mean = report.functions.iter().map(|f| f.sens).sum::<f64>() / report.functions.len().max(1) as f64;
        println!("model sensitivity over {} functions: mean {mean:.4}", report.functions.len());
    }
    println!(
        "{} variants from {} targets ({} skipped) -> {}",
        variants.len(),
        targets.len(),
        skipped,
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn analyze_cmd(run_dir: &Path, out_dir: &Path, fit: bool, variants: Option<&Path>, bootstrap: usize, seed: u64) -> Result<ExitCode, Failure> {
    let records: Vec<EvalRecord> = runner::read_jsonl(&run_dir.join(RECORDS_FILE))?;
    let curves = aggregate(&records);
    let written = analysis::export_curves_csv(&curves, out_dir).map_err(other)?;
    write_jsonl(&curves, &out_dir.join("curves.jsonl")).map_err(other)?;
    let stats: Vec<serde_json::Value> = curves
        .iter()
        .filter_map(|c| {
            let s = curve_lim_stats(c).ok()?;
            Some(serde_json::json!({
                "model": c.model,
                "task": c.task_type,
                "distractor_count": c.distractor_count,
                "max": s.max,
                "min": s.min,
                "drop_pp": s.drop_pp,
                "drop_rel": s.drop_rel,
                "drop_rel_undefined": s.drop_rel_undefined(),
            }))
        })
        .collect();
    write_jsonl(&stats, &out_dir.join("lim_stats.jsonl")).map_err(other)?;
    println!("wrote {} curve files to {}", written.len(), out_dir.display());

    if fit {
        let fits = fit_records(&records, variants, bootstrap, seed)?;
        analysis::export_fits_csv(&fits, &out_dir.join("fits.csv")).map_err(other)?;
        write_jsonl(&fits, &out_dir.join("fits.jsonl")).map_err(other)?;
        for (label, f) in &fits {
            println!(
                "{label}: {} with a={:.4} b={:.4} c={:.4}{}",
                f.model_form,
                f.params.a,
                f.params.b,
                f.params.c,
                f.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Exponential fits, one per (model, task, count) group. The x axis is the
/// removed-line fraction when a variant file is given, otherwise the
/// relative position `i / (P - 1)`. Observations are clustered by target
/// function for the bootstrap.
fn fit_records(records: &[EvalRecord], variants: Option<&Path>, bootstrap: usize, seed: u64) -> Result<Vec<(String, DecayFit)>, Failure> {
    let variant_info: HashMap<String, IncompleteVariant> = match variants {
        Some(p) => runner::read_jsonl::<IncompleteVariant>(p)?
            .into_iter()
            .map(|v| (v.id.clone(), v))
            .collect(),
        None => HashMap::new(),
    };
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in records {
        let Some(s) = &r.score else { continue };
        let y = f64::from(u8::from(s.exact));
        let (x, cluster) = if variants.is_some() {
            match variant_info.get(&r.target_id) {
                Some(v) => (*v.removed_fraction.numer() as f64 / *v.removed_fraction.denom() as f64, v.parent_id.clone()),
                None => (0.0, r.target_id.clone()),
            }
        } else {
            (r.position_index as f64 / (r.positions.max(2) - 1) as f64, r.target_id.clone())
        };
        let label = if variants.is_some() {
            format!("{}/{}", r.model, r.task_type)
        } else {
            format!("{}/{}/{}", r.model, r.task_type, r.distractor_count)
        };
        groups.entry(label).or_default().entry(cluster).or_default().push((x, y));
    }
    let mut fits = Vec::new();
    for (label, clusters) in groups {
        let clusters: Vec<Vec<(f64, f64)>> = clusters.into_values().collect();
        let result = if clusters.len() >= 2 {
            fit::fit_with_ci(&clusters, bootstrap, 0.95, seed)
        } else {
            let (pts, w) = fit::bucket_points(clusters.iter().flatten().copied());
            fit::fit_exponential(&pts, &w)
        };
        match result {
            Ok(f) => fits.push((label, f)),
            Err(e) => log::warn!("{label}: no fit ({e})"),
        }
    }
    Ok(fits)
}
