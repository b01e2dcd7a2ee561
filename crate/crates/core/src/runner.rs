//! Experiment execution with a resumable, append-only JSONL log.
//!
//! A run directory holds:
//!
//! * `config.json` – the configuration the run was started with;
//! * `instances.jsonl` – every task instance of the grid, in order;
//! * `records.jsonl` – one [`EvalRecord`] per model call, append-only.
//!
//! Restarting a run skips instances that already have a completed record,
//! so any sequence of interruptions and restarts ends with exactly one
//! completed record per instance.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{aggregate, curve_lim_stats, PositionalCurve};
use crate::client::{ChatModel, ChatRequest, ClientError, HttpModel, MockKind, MockModel, ModelEndpoint};
use crate::corpus::{Corpus, CorpusFormat, SimpleTokenizer, TokenEstimator};
use crate::exec::{Executor, SubprocessExecutor};
use crate::record::{EvalRecord, Usage, SCHEMA_VERSION};
use crate::scoring::score_completion;
use crate::semtrace;
use crate::tasks::{build_prompt, make_instances, InstanceGrid, TargetSnippet, TaskInstance, TaskType};

pub const CONFIG_FILE: &str = "config.json";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {detail}")]
    Log { path: PathBuf, line: usize, detail: String },
    #[error("{0}")]
    Setup(String),
}

impl RunError {
    /// Configuration problems map to exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Http(ModelEndpoint),
    Mock {
        mock: MockKind,
        #[serde(default)]
        delay_ms: u64,
        #[serde(default = "one")]
        max_in_flight: usize,
    },
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn ChatModel>, RunError> {
        match self {
            ModelSpec::Http(ep) => Ok(Box::new(HttpModel::new(ep.clone()).map_err(|e| RunError::Config(e.to_string()))?)),
            ModelSpec::Mock {
                mock,
                delay_ms,
                max_in_flight,
            } => Ok(Box::new(
                MockModel::new(*mock)
                    .with_delay(*delay_ms)
                    .with_in_flight(*max_in_flight),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetSource {
    /// Freshly generated SemTrace tasks.
    Semtrace { digits: u32, count: usize },
    /// JSONL of `{id, code, input, output}` objects.
    File { path: PathBuf },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub path: PathBuf,
    pub format: CorpusFormat,
    /// Keep only functions between the 25th and 75th length percentiles.
    #[serde(default = "default_true")]
    pub filter: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Distractor sampling.
    pub corpus: u64,
    /// SemTrace generation.
    pub generation: u64,
    /// Target subsampling and line choice.
    pub sampling: u64,
    /// Hex keys.
    pub keys: u64,
}

fn default_failures() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub task_type: TaskType,
    pub targets: TargetSource,
    pub corpus: CorpusSpec,
    pub distractor_counts: Vec<usize>,
    pub positions: usize,
    #[serde(default = "one_f")]
    pub subset_fraction: f64,
    pub seeds: Seeds,
    /// Query before and after the code block.
    #[serde(default = "default_true")]
    pub qac: bool,
    /// Show line keys in prediction prompts too.
    #[serde(default)]
    pub show_keys: bool,
    /// Overrides the per-task default token budget.
    #[serde(default)]
    pub max_tokens: Option<u32>,
    /// Command starting an execution worker, for grading input prediction.
    #[serde(default)]
    pub executor: Option<String>,
    /// Abort after this many consecutive failed calls.
    #[serde(default = "default_failures")]
    pub max_consecutive_failures: u32,
    pub output_dir: PathBuf,
}

fn one_f() -> f64 {
    1.0
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.positions < 2 {
            return bad(format!("positions must be >= 2, got {}", self.positions));
        }
        if self.distractor_counts.is_empty() {
            return bad("distractor_counts is empty".into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!("subset_fraction {} not in (0, 1]", self.subset_fraction));
        }
        if let ModelSpec::Http(ep) = &self.model {
            ep.validate().map_err(RunError::Config)?;
        }
        if let ModelSpec::Mock { max_in_flight: 0, .. } = &self.model {
            return bad("max_in_flight must be at least 1".into());
        }
        if let TargetSource::Semtrace { digits, .. } = self.targets {
            if !(semtrace::MIN_DIGITS..=semtrace::MAX_DIGITS).contains(&digits) {
                return bad(format!("digits {digits} out of range"));
            }
            if self.task_type != TaskType::SemtraceOut && !self.task_type.is_retrieval() {
                return bad(format!("SemTrace targets cannot be used for {}", self.task_type));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (sorted keys), leaving out the
    /// output directory. Two runs with the same hash used identical seeds,
    /// grid and flags.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        format!("run-{}", &self.hash()[..12])
    }

    pub fn grid(&self) -> InstanceGrid {
        InstanceGrid {
            task_type: self.task_type,
            distractor_counts: self.distractor_counts.clone(),
            positions: self.positions,
            subset_fraction: self.subset_fraction,
            seed: self.seeds.sampling,
            distractor_seed: Some(self.seeds.corpus),
            key_seed: Some(self.seeds.keys),
            show_keys: self.show_keys,
        }
    }
}

pub fn load_targets(source: &TargetSource, seeds: &Seeds) -> Result<Vec<TargetSnippet>, RunError> {
    match source {
        TargetSource::Semtrace { digits, count } => Ok(semtrace::generate_many(seeds.generation, *digits, *count)
            .map_err(|e| RunError::Config(e.to_string()))?
            .iter()
            .map(TargetSnippet::from_semtrace)
            .collect()),
        TargetSource::File { path } => read_jsonl(path),
    }
}

pub fn load_corpus(spec: &CorpusSpec) -> Result<Corpus, RunError> {
    let corpus = Corpus::ingest(&spec.path, spec.format).map_err(|e| RunError::Setup(e.to_string()))?;
    Ok(if spec.filter { corpus.filter_by_percentile() } else { corpus })
}

/// Build the full instance list for a configuration.
pub fn build_instances(cfg: &RunConfig) -> Result<Vec<TaskInstance>, RunError> {
    let targets = load_targets(&cfg.targets, &cfg.seeds)?;
    let corpus = load_corpus(&cfg.corpus)?;
    make_instances(&targets, &corpus, &cfg.grid(), &SimpleTokenizer).map_err(|e| RunError::Setup(e.to_string()))
}

/// Read a JSONL file. A final line without a trailing newline that fails
/// to parse is treated as a write torn by a crash and ignored; any other
/// malformed line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
            break;
        }
        n += 1;
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(v) => out.push(v),
            Err(_) if !complete => break,
            Err(e) => {
                return Err(RunError::Log {
                    path: path.to_path_buf(),
                    line: n,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Cut a torn final line (no trailing newline) off the end of a log so
/// that appends start on a fresh line.
fn repair_tail(path: &Path) -> Result<(), RunError> {
    let mut f = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(io_err(path))?;
    if buf.is_empty() || buf.ends_with(b"\n") {
        return Ok(());
    }
    let keep = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!("{}: dropping {} bytes of torn final record", path.display(), buf.len() - keep);
    f.set_len(keep as u64).map_err(io_err(path))?;
    f.seek(SeekFrom::End(0)).map_err(io_err(path))?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    out
}

/// Appends records one line at a time, flushing each.
pub struct RecordLog {
    path: PathBuf,
    file: File,
}

impl RecordLog {
    pub fn open(path: &Path) -> Result<Self, RunError> {
        repair_tail(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &EvalRecord) -> Result<(), RunError> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub instances: usize,
    /// Instances already complete before this invocation.
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
    pub aborted: bool,
    pub usage: Usage,
    /// Calls whose token counts were estimated rather than reported.
    pub estimated_usage_calls: usize,
    pub log: PathBuf,
}

impl RunSummary {
    /// Every instance has a completed record.
    pub fn is_complete(&self) -> bool {
        !self.aborted && self.failed == 0 && self.skipped + self.completed == self.instances
    }
}

/// Everything [`run`] needs besides the config: the model and an optional
/// execution oracle. Split out so tests can inject their own.
pub struct RunContext<'a> {
    pub model: &'a dyn ChatModel,
    pub executor: Option<&'a dyn Executor>,
}

fn check_or_write_config(cfg: &RunConfig, dir: &Path) -> Result<(), RunError> {
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        let prev = RunConfig::load(&path)?;
        if prev.hash() != cfg.hash() {
            return Err(RunError::Config(format!(
                "{} holds a different configuration (hash {}); refusing to mix runs",
                dir.display(),
                prev.hash()
            )));
        }
        return Ok(());
    }
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_atomic(&path, text.as_bytes())
}

/// Execute (or resume) a run using the model and executor named in the
/// config.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let executor = match &cfg.executor {
        Some(cmd) => Some(SubprocessExecutor::from_command_line(cmd).map_err(|e| RunError::Setup(e.to_string()))?),
        None => None,
    };
    run_with(
        cfg,
        &RunContext {
            model: model.as_ref(),
            executor: executor.as_ref().map(|e| e as &dyn Executor),
        },
    )
}

pub fn run_with(cfg: &RunConfig, ctx: &RunContext<'_>) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    check_or_write_config(cfg, dir)?;
    let instances = build_instances(cfg)?;
    write_atomic(&dir.join(INSTANCES_FILE), &jsonl_bytes(&instances))?;

    let log_path = dir.join(RECORDS_FILE);
    let mut log = RecordLog::open(&log_path)?;
    let done: HashSet<String> = if log_path.exists() {
        read_jsonl::<EvalRecord>(&log_path)?
            .into_iter()
            .filter(EvalRecord::is_complete)
            .map(|r| r.instance_id)
            .collect()
    } else {
        HashSet::new()
    };
    let pending: Vec<&TaskInstance> = instances.iter().filter(|i| !done.contains(&i.id)).collect();
    let config_hash = cfg.hash();
    let mut summary = RunSummary {
        run_id: cfg.run_id(),
        config_hash: config_hash.clone(),
        instances: instances.len(),
        skipped: instances.len() - pending.len(),
        log: log_path.clone(),
        ..Default::default()
    };
    log::info!(
        "{}: {} instances, {} already complete",
        summary.run_id,
        summary.instances,
        summary.skipped
    );

    let mut streak = 0u32;
    let mut io_failure = None;
    let run_id = summary.run_id.clone();
    let work = |inst: &&TaskInstance| evaluate(cfg, ctx, inst, &run_id, &config_hash);
    crate::client::dispatch(&pending, ctx.model.max_in_flight(), work, |_, (record, estimated)| {
        if let Err(e) = log.append(&record) {
            io_failure = Some(e);
            return false;
        }
        if record.is_complete() {
            summary.completed += 1;
            streak = 0;
        } else {
            summary.failed += 1;
            streak += 1;
            log::warn!("{run_id}: {} failed: {}", record.instance_id, record.error.as_deref().unwrap_or(""));
        }
        if let Some(u) = record.usage {
            summary.usage.prompt_tokens += u.prompt_tokens;
            summary.usage.completion_tokens += u.completion_tokens;
        }
        summary.estimated_usage_calls += usize::from(estimated);
        if streak >= cfg.max_consecutive_failures {
            summary.aborted = true;
            log::error!("{run_id}: {streak} consecutive failures, aborting");
            return false;
        }
        true
    });
    if let Some(e) = io_failure {
        return Err(e);
    }
    Ok(summary)
}

/// Call the model on one instance and grade the answer. The flag reports
/// whether token usage was estimated locally.
fn evaluate(cfg: &RunConfig, ctx: &RunContext<'_>, inst: &TaskInstance, run_id: &str, config_hash: &str) -> (EvalRecord, bool) {
    let bundle = build_prompt(inst, cfg.qac);
    let max_tokens = cfg.max_tokens.unwrap_or(inst.task_type.default_max_tokens());
    let req = ChatRequest {
        bundle: &bundle,
        instance: inst,
        max_tokens,
    };
    let request = ctx.model.request_body(&req);
    let result = ctx.model.complete(&req);
    let mut record = EvalRecord {
        schema_version: SCHEMA_VERSION,
        instance_id: inst.id.clone(),
        run_id: run_id.to_string(),
        config_hash: config_hash.to_string(),
        model: ctx.model.name().to_string(),
        task_type: inst.task_type,
        target_id: inst.target.id.clone(),
        position_index: inst.context.position_index,
        positions: inst.context.positions,
        distractor_count: inst.context.distractor_count,
        granularity: inst.context.granularity,
        prompt: bundle.clone(),
        request,
        completion: None,
        raw_response: None,
        finish_reason: None,
        usage: None,
        score: None,
        attempts: 0,
        latency_ms: 0,
        error: None,
    };
    let mut estimated = false;
    match result {
        Ok(c) => {
            record.score = Some(score_completion(inst, &c.text, ctx.executor));
            record.usage = c.usage.or_else(|| {
                estimated = true;
                Some(Usage {
                    prompt_tokens: bundle.messages.iter().map(|m| SimpleTokenizer.count(&m.content) as u64).sum(),
                    completion_tokens: SimpleTokenizer.count(&c.text) as u64,
                })
            });
            record.latency_ms = c.latency.as_millis() as u64;
            record.attempts = c.attempts;
            record.finish_reason = Some(c.finish_reason);
            record.raw_response = Some(c.raw);
            record.completion = Some(c.text);
        }
        Err(e) => {
            record.attempts = e.attempts();
            record.error = Some(describe(&e));
        }
    }
    (record, estimated)
}

fn describe(e: &ClientError) -> String {
    let kind = match e {
        ClientError::AuthMissing(_) => "auth_missing",
        ClientError::AuthRejected { .. } => "auth_rejected",
        ClientError::Http { .. } => "http",
        ClientError::RetriesExhausted { .. } => "retries_exhausted",
        ClientError::Decode(_) => "decode",
        ClientError::Setup(_) => "setup",
    };
    format!("{kind}: {e}")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RescoreSummary {
    pub records: usize,
    pub rescored: usize,
    pub changed: usize,
    pub missing_instance: usize,
}

/// Re-grade every answered record in a run directory with the current
/// scoring rules, writing the result to `out`. The original log is left
/// untouched and no model is contacted.
pub fn rescore(dir: &Path, out: &Path, executor: Option<&dyn Executor>) -> Result<RescoreSummary, RunError> {
    let instances: Vec<TaskInstance> = read_jsonl(&dir.join(INSTANCES_FILE))?;
    let by_id: std::collections::HashMap<&str, &TaskInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut records: Vec<EvalRecord> = read_jsonl(&dir.join(RECORDS_FILE))?;
    let mut s = RescoreSummary {
        records: records.len(),
        ..Default::default()
    };
    for r in &mut records {
        let (Some(text), Some(inst)) = (&r.completion, by_id.get(r.instance_id.as_str())) else {
            s.missing_instance += usize::from(r.completion.is_some());
            continue;
        };
        let new = score_completion(inst, text, executor);
        s.rescored += 1;
        if r.score.as_ref() != Some(&new) {
            s.changed += 1;
        }
        r.score = Some(new);
    }
    write_atomic(out, &jsonl_bytes(&records))?;
    Ok(s)
}

/// Plain-text tables: accuracy per position and the best-to-worst drop for
/// every (model, task, count) group.
pub fn report_text(curves: &[PositionalCurve]) -> String {
    let mut out = String::new();
    for c in curves {
        out.push_str(&format!(
            "{} / {} / {} distractors\n",
            c.model, c.task_type, c.distractor_count
        ));
        out.push_str("  position  exact   rel     partial  n\n");
        for (i, cell) in c.accuracy_by_position.iter().enumerate() {
            let partial = c
                .partial_by_position
                .as_ref()
                .map_or("   -   ".to_string(), |p| format!("{:7.3}", p[i].mean));
            out.push_str(&format!(
                "  {i:>8}  {:6.3}  {:6.3}  {partial}  {}\n",
                cell.mean, c.relative_by_position[i], cell.n
            ));
        }
        if let Ok(s) = curve_lim_stats(c) {
            let rel = s.drop_rel.map_or("undefined".to_string(), |r| format!("{r:.2}%"));
            out.push_str(&format!(
                "  max {:.3}  min {:.3}  drop {:.2} pp  ({rel})\n",
                s.max, s.min, s.drop_pp
            ));
        }
        out.push('\n');
    }
    out
}

/// Load a run's records and aggregate them.
pub fn curves_for(dir: &Path) -> Result<Vec<PositionalCurve>, RunError> {
    Ok(aggregate(&read_jsonl::<EvalRecord>(&dir.join(RECORDS_FILE))?))
}
