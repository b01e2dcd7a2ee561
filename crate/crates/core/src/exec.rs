//! Execution oracle interface.
//!
//! Ground truth for incomplete functions and grading of input prediction
//! need a Python interpreter. The interpreter runs as a separate worker
//! process speaking line-delimited JSON on stdin/stdout:
//!
//! ```text
//! worker -> {"protocol": "pyexec", "version": 1}                 (handshake, once)
//! caller -> {"id": "r1", "source": "def f(x): ...", "args_literal": "81", "timeout_ms": 2000}
//! worker -> {"id": "r1", "status": "ok", "value_literal": "[38, 169, 16, 7]"}
//! worker -> {"id": "r2", "status": "error", "error_kind": "NameError", "message": "..."}
//! worker -> {"id": "r3", "status": "timeout"}
//! ```
//!
//! [`SubprocessExecutor`] drives such a worker. [`SemTraceInterpreter`] is an
//! in-process executor for straight-line SemTrace functions (complete or
//! line-removed), which lets the pipeline run without the worker.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::literal::{parse_literal, LiteralValue};
use crate::semtrace::{self, Statement};

pub const PROTOCOL: &str = "pyexec";
pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_TIMEOUT_MS: u64 = 60_000;
/// Extra wall-clock allowance on top of a request's own timeout before the
/// caller gives up on the worker and kills it.
pub const KILL_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub id: String,
    pub source: String,
    pub args_literal: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResponse {
    pub id: Option<String>,
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_literal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecResponse {
    pub fn ok(id: &str, value: &LiteralValue) -> Self {
        Self {
            id: Some(id.to_string()),
            status: ExecStatus::Ok,
            value_literal: Some(value.repr()),
            error_kind: None,
            message: None,
        }
    }

    pub fn error(id: &str, kind: &str, message: impl Into<String>) -> Self {
        Self {
            id: Some(id.to_string()),
            status: ExecStatus::Error,
            value_literal: None,
            error_kind: Some(kind.to_string()),
            message: Some(message.into()),
        }
    }

    pub fn timeout(id: &str) -> Self {
        Self {
            id: Some(id.to_string()),
            status: ExecStatus::Timeout,
            value_literal: None,
            error_kind: None,
            message: None,
        }
    }

    /// Parsed value when the call succeeded.
    pub fn value(&self) -> Option<LiteralValue> {
        match self.status {
            ExecStatus::Ok => self
                .value_literal
                .as_deref()
                .and_then(|v| parse_literal(v).ok())
                .map(|p| p.value),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("executor unavailable: {0}")]
    Unavailable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("worker died: {0}")]
    WorkerDied(String),
    #[error("worker did not answer within its deadline")]
    Hung,
}

/// Something that can run `f(args)` for a source defining `f`.
pub trait Executor: Send + Sync {
    fn execute(&self, request: &ExecRequest) -> Result<ExecResponse, ExecError>;
}

pub fn validate_request(req: &ExecRequest) -> Result<(), ExecError> {
    if !(1..=MAX_TIMEOUT_MS).contains(&req.timeout_ms) {
        return Err(ExecError::InvalidRequest(format!(
            "timeout_ms {} outside [1, {MAX_TIMEOUT_MS}]",
            req.timeout_ms
        )));
    }
    Ok(())
}

/// Evaluates SemTrace-shaped functions without a Python process.
///
/// Mirrors Python semantics for the statements such functions contain:
/// using `arr` before the initializer raises `NameError`, an out-of-range
/// index raises `IndexError`, and falling off the end returns `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SemTraceInterpreter;

impl Executor for SemTraceInterpreter {
    fn execute(&self, req: &ExecRequest) -> Result<ExecResponse, ExecError> {
        validate_request(req)?;
        let stmts = match semtrace::parse_source(&req.source) {
            Ok(s) => s,
            Err(e) => return Ok(ExecResponse::error(&req.id, "UnsupportedSource", e.to_string())),
        };
        let x = match parse_literal(&req.args_literal).map(|p| p.value) {
            Ok(LiteralValue::Int(v)) => v,
            _ => {
                return Ok(ExecResponse::error(
                    &req.id,
                    "TypeError",
                    format!("expected one integer argument, got {:?}", req.args_literal),
                ))
            }
        };
        let mut arr: Option<Vec<LiteralValue>> = None;
        for stmt in stmts {
            match stmt {
                Statement::Init { len } => arr = Some(vec![LiteralValue::int(0); len]),
                Statement::Assign(a) => {
                    let Some(items) = arr.as_mut() else {
                        return Ok(ExecResponse::error(&req.id, "NameError", "name 'arr' is not defined"));
                    };
                    let Some(slot) = items.get_mut(a.index) else {
                        return Ok(ExecResponse::error(&req.id, "IndexError", "list assignment index out of range"));
                    };
                    *slot = LiteralValue::Int(&x + a.offset);
                }
                Statement::Return => {
                    return Ok(match arr {
                        Some(items) => ExecResponse::ok(&req.id, &LiteralValue::List(items)),
                        None => ExecResponse::error(&req.id, "NameError", "name 'arr' is not defined"),
                    })
                }
            }
        }
        Ok(ExecResponse::ok(&req.id, &LiteralValue::None))
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Deserialize)]
struct Handshake {
    protocol: String,
    version: u32,
}

/// One worker process; restarted transparently after it dies.
pub struct SubprocessExecutor {
    program: String,
    args: Vec<String>,
    session: Mutex<Option<Session>>,
}

impl SubprocessExecutor {
    /// Launch `program args...` and wait for its handshake line.
    pub fn spawn(program: impl Into<String>, args: Vec<String>) -> Result<Self, ExecError> {
        let exec = Self {
            program: program.into(),
            args,
            session: Mutex::new(None),
        };
        *exec.session.lock().expect("fresh mutex") = Some(exec.start()?);
        Ok(exec)
    }

    /// Parse a shell-like command line (whitespace separated).
    pub fn from_command_line(cmd: &str) -> Result<Self, ExecError> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| ExecError::Unavailable("empty executor command".into()))?;
        Self::spawn(program, parts.collect())
    }

    fn start(&self) -> Result<Session, ExecError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ExecError::Unavailable(format!("{}: {e}", self.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in stdout.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let line = match lines.recv_timeout(Duration::from_secs(30)) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(ExecError::Unavailable(e.to_string())),
            Err(_) => return Err(ExecError::Unavailable("no handshake from worker".into())),
        };
        let hs: Handshake = serde_json::from_str(line.trim())
            .map_err(|e| ExecError::Protocol(format!("bad handshake {line:?}: {e}")))?;
        if hs.protocol != PROTOCOL || hs.version != PROTOCOL_VERSION {
            return Err(ExecError::Protocol(format!(
                "worker speaks {} v{}, expected {PROTOCOL} v{PROTOCOL_VERSION}",
                hs.protocol, hs.version
            )));
        }
        Ok(Session { child, stdin, lines })
    }

    fn round_trip(session: &mut Session, req: &ExecRequest) -> Result<ExecResponse, ExecError> {
        let died = |e: std::io::Error| ExecError::WorkerDied(e.to_string());
        let line = serde_json::to_string(req).expect("request serializes");
        writeln!(session.stdin, "{line}").map_err(died)?;
        session.stdin.flush().map_err(died)?;
        let deadline = Duration::from_millis(req.timeout_ms) + KILL_GRACE;
        let reply = match session.lines.recv_timeout(deadline) {
            Ok(line) => line.map_err(died)?,
            Err(RecvTimeoutError::Timeout) => return Err(ExecError::Hung),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(ExecError::WorkerDied("worker closed stdout".into()))
            }
        };
        let resp: ExecResponse = serde_json::from_str(reply.trim())
            .map_err(|e| ExecError::Protocol(format!("bad response {reply:?}: {e}")))?;
        if resp.id.as_deref() != Some(req.id.as_str()) {
            return Err(ExecError::Protocol(format!(
                "response id {:?} does not match request {:?}",
                resp.id, req.id
            )));
        }
        Ok(resp)
    }
}

impl Executor for SubprocessExecutor {
    fn execute(&self, req: &ExecRequest) -> Result<ExecResponse, ExecError> {
        validate_request(req)?;
        let mut guard = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.start()?);
        }
        let result = Self::round_trip(guard.as_mut().expect("session present"), req);
        match result {
            Ok(resp) => Ok(resp),
            Err(ExecError::WorkerDied(msg)) => {
                // Drop the dead session; the next call starts a new worker.
                *guard = None;
                Ok(ExecResponse::error(&req.id, "WorkerDied", msg))
            }
            Err(ExecError::Hung) => {
                *guard = None;
                Ok(ExecResponse::timeout(&req.id))
            }
            Err(e) => {
                *guard = None;
                Err(e)
            }
        }
    }
}

/// Several worker sessions behind one handle.
pub struct ExecutorPool {
    workers: Vec<Box<dyn Executor>>,
    next: std::sync::atomic::AtomicUsize,
}

impl ExecutorPool {
    pub fn new(workers: Vec<Box<dyn Executor>>) -> Self {
        assert!(!workers.is_empty(), "pool needs at least one worker");
        Self {
            workers,
            next: std::sync::atomic::AtomicUsize::new(0),
        }
    }
}

impl Executor for ExecutorPool {
    fn execute(&self, req: &ExecRequest) -> Result<ExecResponse, ExecError> {
        let i = self.next.fetch_add(1, std::sync::atomic::Ordering::Relaxed) % self.workers.len();
        self.workers[i].execute(req)
    }
}
