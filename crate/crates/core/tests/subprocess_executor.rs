//! The worker protocol, driven against a small Python worker.

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use recallbench::exec::{ExecRequest, ExecStatus, Executor, ExecutorPool, SemTraceInterpreter, SubprocessExecutor};
use recallbench::literal::parse_literal;
use recallbench::semtrace;

fn python() -> Option<String> {
    ["python3", "python"]
        .into_iter()
        .find(|p| Command::new(p).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(str::to_string)
}

fn worker() -> Option<SubprocessExecutor> {
    let Some(py) = python() else {
        eprintln!("python not found; skipping worker protocol test");
        return None;
    };
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_worker.py");
    Some(SubprocessExecutor::spawn(py, vec![script.display().to_string()]).unwrap())
}

fn req(id: &str, source: &str, args: &str, timeout_ms: u64) -> ExecRequest {
    ExecRequest {
        id: id.into(),
        source: source.into(),
        args_literal: args.into(),
        timeout_ms,
    }
}

#[test]
fn listing_ok_error_and_timeout() {
    let Some(w) = worker() else { return };
    let task = semtrace::generate(5, 2).unwrap();
    let src = semtrace::render(&task);
    let r = w.execute(&req("a", &src, &task.x.to_string(), 2000)).unwrap();
    assert_eq!(r.status, ExecStatus::Ok);
    assert_eq!(r.value_literal.as_deref(), Some(task.expected_literal().as_str()));

    let no_init: String = src.lines().filter(|l| !l.contains("arr = [")).collect::<Vec<_>>().join("\n");
    let r = w.execute(&req("b", &no_init, "1", 2000)).unwrap();
    assert_eq!((r.status, r.error_kind.as_deref()), (ExecStatus::Error, Some("NameError")));

    let start = Instant::now();
    let r = w.execute(&req("c", "def f(x):\n    while True: pass", "1", 100)).unwrap();
    assert_eq!(r.status, ExecStatus::Timeout);
    assert!(start.elapsed() < Duration::from_millis(200) + Duration::from_secs(1));
}

#[test]
fn crashed_worker_is_replaced() {
    let Some(w) = worker() else { return };
    let r = w.execute(&req("x", "def f(x):\n    return x", "'__crash__'", 1000)).unwrap();
    assert_eq!(r.status, ExecStatus::Error);
    assert_eq!(r.id.as_deref(), Some("x"));
    let r = w.execute(&req("y", "def f(x):\n    return x + 1", "41", 1000)).unwrap();
    assert_eq!(r.value_literal.as_deref(), Some("42"));
}

#[test]
fn hung_worker_is_killed_and_replaced() {
    let Some(w) = worker() else { return };
    let start = Instant::now();
    let r = w.execute(&req("h", "def f(x):\n    return x", "'__hang__'", 100)).unwrap();
    assert_eq!(r.status, ExecStatus::Timeout);
    assert!(start.elapsed() < Duration::from_secs(10));
    let r = w.execute(&req("n", "def f(x):\n    return [x, x]", "3", 1000)).unwrap();
    assert_eq!(r.value_literal.as_deref(), Some("[3, 3]"));
}

#[test]
fn worker_agrees_with_in_process_oracle() {
    let Some(first) = worker() else { return };
    let pool = ExecutorPool::new(vec![Box::new(first), Box::new(self::worker().unwrap())]);
    for (i, task) in semtrace::generate_many(17, 3, 200).unwrap().iter().enumerate() {
        let r = req(&format!("t{i}"), &semtrace::render(task), &task.x.to_string(), 2000);
        let a = pool.execute(&r).unwrap();
        let b = SemTraceInterpreter.execute(&r).unwrap();
        assert_eq!(a.value(), b.value());
        assert_eq!(
            parse_literal(a.value_literal.as_deref().unwrap()).unwrap().value,
            parse_literal(&semtrace::format_int_list(&semtrace::oracle(task))).unwrap().value
        );
    }
}

#[test]
fn wrong_handshake_is_rejected() {
    let Some(py) = python() else { return };
    let err = SubprocessExecutor::spawn(py, vec!["-c".into(), "print('{\"protocol\": \"other\", \"version\": 1}')".into()]);
    assert!(err.is_err());
}
