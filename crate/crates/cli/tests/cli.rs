//! The `recallbench` binary end to end: subcommands, files and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recallbench"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn recallbench")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    let text: String = (0..30)
        .map(|i| {
            let body: String = (0..(i % 4 + 1)).map(|j| format!("\n    t{j} = s * {j}")).collect();
            json!({"id": format!("c{i}"), "source": format!("def helper{i}(s):{body}\n    return s")}).to_string() + "\n"
        })
        .collect();
    fs::write(&path, text).unwrap();
    path
}

fn write_config(dir: &Path, name: &str, targets: Value, mock: &str, out: &Path) -> PathBuf {
    let cfg = json!({
        "model": {"type": "mock", "mock": {"kind": mock}, "max_in_flight": 2},
        "task_type": "semtrace_out",
        "targets": targets,
        "corpus": {"path": write_corpus(dir), "format": "jsonl"},
        "distractor_counts": [4],
        "positions": 3,
        "seeds": {"corpus": 1, "generation": 2, "sampling": 3, "keys": 4},
        "output_dir": out,
    });
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_writes_the_requested_number_of_tasks_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = run(&["gen", "--digits", "2", "--count", "800", "--seed", "7", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let recs = lines(&a);
    assert_eq!(recs.len(), 800);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let first = &recs[0];
    assert!(first["code"].as_str().unwrap().starts_with("def f(x):"));
    assert!(first["id"].as_str().unwrap().starts_with("semtrace-d2-"));

    let to_stdout = run(&["gen", "--digits", "3", "--count", "5", "--seed", "1"]);
    assert_eq!(String::from_utf8(to_stdout.stdout).unwrap().lines().count(), 5);
    assert!(!run(&["gen", "--digits", "9", "--count", "1", "--seed", "1"]).status.success());
}

#[test]
fn run_report_rescore_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "cfg.json", json!({"type": "semtrace", "digits": 2, "count": 4}), "oracle", &out);

    let o = run(&["run", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out.join("records.jsonl")).len(), 12);
    assert!(out.join("config.json").exists() && out.join("instances.jsonl").exists());

    let report = run(&["report", "--run-dir", p(&out)]);
    assert!(report.status.success());
    assert!(String::from_utf8(report.stdout).unwrap().contains("mock-oracle"));

    let rescored = dir.path().join("rescored.jsonl");
    assert!(run(&["rescore", "--run-dir", p(&out), "--out", p(&rescored)]).status.success());
    assert!(lines(&rescored).iter().all(|r| r["score"]["exact"] == true));

    let analysis = dir.path().join("analysis");
    let o = run(&["analyze", "--run-dir", p(&out), "--out-dir", p(&analysis), "--fit", "exp", "--bootstrap", "100"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["curves.csv", "curves.jsonl", "lim_stats.jsonl", "fits.csv", "fits.jsonl"] {
        assert!(analysis.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(analysis.join("curves.csv")).unwrap();
    assert!(csv.starts_with("model,task,distractor_count,position_index,positions,metric,mean,relative,n"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let a = write_config(dir.path(), "a.json", json!({"type": "semtrace", "digits": 2, "count": 2}), "oracle", &out);
    assert_eq!(run(&["run", "--config", p(&a)]).status.code(), Some(0));

    // Same directory, different configuration.
    let b = write_config(dir.path(), "b.json", json!({"type": "semtrace", "digits": 3, "count": 2}), "oracle", &out);
    assert_eq!(run(&["run", "--config", p(&b)]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"model\": 1}").unwrap();
    assert_eq!(run(&["run", "--config", p(&bad)]).status.code(), Some(2));
    assert_eq!(run(&["run", "--config", p(&dir.path().join("missing.json"))]).status.code(), Some(2));
}

#[test]
fn wrong_answers_still_complete_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // A zero-token budget hides every target, so every answer is wrong but
    // every call still succeeds: the run itself is complete.
    let cfg = json!({
        "model": {"type": "mock", "mock": {"kind": "truncating", "max_tokens": 0}},
        "task_type": "semtrace_out",
        "targets": {"type": "semtrace", "digits": 2, "count": 2},
        "corpus": {"path": write_corpus(dir.path()), "format": "jsonl"},
        "distractor_counts": [2],
        "positions": 2,
        "seeds": {"corpus": 1, "generation": 2, "sampling": 3, "keys": 4},
        "output_dir": out,
    });
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(run(&["run", "--config", p(&path)]).status.code(), Some(0));
    assert!(lines(&out.join("records.jsonl")).iter().all(|r| r["score"]["exact"] == false));

    // A target file that does not exist fails the run.
    let cfg = json!({
        "model": {"type": "mock", "mock": {"kind": "oracle"}},
        "task_type": "semtrace_out",
        "targets": {"type": "file", "path": dir.path().join("nope.jsonl")},
        "corpus": {"path": write_corpus(dir.path()), "format": "jsonl"},
        "distractor_counts": [2],
        "positions": 2,
        "seeds": {"corpus": 1, "generation": 2, "sampling": 3, "keys": 4},
        "output_dir": dir.path().join("run2"),
    });
    fs::write(&path, cfg.to_string()).unwrap();
    assert_ne!(run(&["run", "--config", p(&path)]).status.code(), Some(0));
}

#[test]
fn failing_endpoint_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = dir.path().join("run");
    let cfg = json!({
        "model": {
            "type": "http",
            "base_url": format!("http://127.0.0.1:{port}/v1"),
            "model_name": "unreachable",
            "max_in_flight": 1,
            "retry": {"max_retries": 0, "base_delay_ms": 1, "max_delay_ms": 1}
        },
        "task_type": "semtrace_out",
        "targets": {"type": "semtrace", "digits": 2, "count": 3},
        "corpus": {"path": write_corpus(dir.path()), "format": "jsonl"},
        "distractor_counts": [2],
        "positions": 2,
        "seeds": {"corpus": 1, "generation": 2, "sampling": 3, "keys": 4},
        "max_consecutive_failures": 3,
        "output_dir": out,
    });
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(run(&["run", "--config", p(&path)]).status.code(), Some(1));
    let recs = lines(&out.join("records.jsonl"));
    assert!(!recs.is_empty() && recs.len() < 6, "aborted after consecutive failures, got {}", recs.len());
    assert!(recs.iter().all(|r| r["error"].is_string()));
}

#[test]
fn sensitivity_pipeline_from_generated_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tasks = d.join("tasks.jsonl");
    assert!(run(&["gen", "--digits", "2", "--count", "3", "--seed", "11", "--out", p(&tasks)]).status.success());

    let sens = d.join("sens");
    let o = run(&["sensitivity", "--targets", p(&tasks), "--cap", "64", "--out-dir", p(&sens)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["settings.json", "variants.jsonl", "variant_targets.jsonl", "interpreter_sensitivity.json", "interpreter_sensitivity.csv"] {
        assert!(sens.join(f).exists(), "{f} missing");
    }
    let curve = lines(&sens.join("semtrace_removal_curve.jsonl"));
    assert!(!curve.is_empty());
    let variants = lines(&sens.join("variants.jsonl"));
    assert!(variants.len() <= 3 * 64 && variants.iter().all(|v| v["gold_output"]["status"].is_string()));

    // Model runs over the complete and the incomplete functions.
    let full = d.join("full");
    let var = d.join("var");
    let cf = write_config(d, "full.json", json!({"type": "file", "path": tasks}), "oracle", &full);
    let cv = write_config(d, "var.json", json!({"type": "file", "path": sens.join("variant_targets.jsonl")}), "oracle", &var);
    assert!(run(&["run", "--config", p(&cf)]).status.success());
    assert!(run(&["run", "--config", p(&cv)]).status.success());

    let o = run(&[
        "sensitivity",
        "--targets",
        p(&tasks),
        "--cap",
        "64",
        "--out-dir",
        p(&sens),
        "--full-run",
        p(&full),
        "--variant-run",
        p(&var),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(sens.join("model_sensitivity.json")).unwrap()).unwrap();
    // The oracle mock answers each variant with that variant's own output,
    // so it never degrades.
    for f in report["functions"].as_array().unwrap() {
        assert_eq!(f["sens"].as_f64().unwrap(), 0.0);
    }

    let analysis = d.join("analysis");
    let o = run(&[
        "analyze",
        "--run-dir",
        p(&var),
        "--out-dir",
        p(&analysis),
        "--fit",
        "exp",
        "--variants",
        p(&sens.join("variants.jsonl")),
        "--bootstrap",
        "100",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(analysis.join("fits.jsonl").exists());
}
