//! Parent side of the JSON-line execution protocol.
//!
//! One `RunRequest` line goes to the child's stdin and one `RunResponse`
//! line comes back on stdout. The parent owns the wall-clock limit: a
//! child that does not answer in time is killed.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Status;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRequest {
    pub source: String,
    pub tests: Vec<String>,
    pub entry_point: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub status: Status,
    #[serde(default)]
    pub per_test: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default)]
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RunnerError {
    #[error("runner exceeded {0:?}")]
    Timeout(Duration),
    #[error("runner exited without a reply{}", stderr_suffix(.stderr))]
    Crashed { stderr: String },
    #[error("runner protocol error: {0}")]
    Protocol(String),
    #[error("runner unavailable: {0}")]
    Unavailable(String),
}

fn stderr_suffix(s: &str) -> String {
    if s.is_empty() {
        String::new()
    } else {
        format!(" (stderr: {s})")
    }
}

impl RunnerError {
    pub fn stderr(&self) -> &str {
        match self {
            RunnerError::Crashed { stderr } => stderr,
            _ => "",
        }
    }
}

/// Executes one request.
pub trait Runner: Send + Sync {
    fn run(&self, request: &RunRequest) -> Result<RunResponse, RunnerError>;
}

/// Runner backed by a closure; for tests and in-process stubs.
pub struct FnRunner<F>(pub F);

impl<F> Runner for FnRunner<F>
where
    F: Fn(&RunRequest) -> Result<RunResponse, RunnerError> + Send + Sync,
{
    fn run(&self, request: &RunRequest) -> Result<RunResponse, RunnerError> {
        (self.0)(request)
    }
}

/// How children are reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChildMode {
    /// Keep a warm child per concurrent caller.
    Warm,
    /// Fresh child per request, started with `--once`.
    Once,
}

/// Keep this much of a child's stderr for diagnostics.
const STDERR_EXCERPT: usize = 2000;

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
}

impl Worker {
    fn spawn(program: &str, args: &[String], once: bool) -> Result<Self, RunnerError> {
        let mut cmd = Command::new(program);
        cmd.args(args);
        if once {
            cmd.arg("--once");
        }
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| RunnerError::Unavailable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut err = child.stderr.take().expect("stderr is piped");

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut buf = [0u8; 1024];
            while let Ok(n) = err.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().expect("stderr buffer poisoned");
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
                if s.len() > 2 * STDERR_EXCERPT {
                    let cut = s.len() - STDERR_EXCERPT;
                    let cut = (cut..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(s.len());
                    s.drain(..cut);
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            stderr,
        })
    }

    fn stderr_excerpt(&self) -> String {
        let s = self.stderr.lock().expect("stderr buffer poisoned");
        let start = s.len().saturating_sub(STDERR_EXCERPT);
        let start = (start..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(s.len());
        s[start..].trim().to_string()
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    /// Sends the request and waits up to `limit` for one reply line.
    fn exchange(&mut self, line: &str, limit: Duration) -> Result<RunResponse, RunnerError> {
        let write = writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush());
        if let Err(e) = write {
            // give the reader a moment to see EOF so stderr is complete
            thread::sleep(Duration::from_millis(20));
            return Err(RunnerError::Crashed {
                stderr: format!("{e}; {}", self.stderr_excerpt()),
            });
        }
        match self.lines.recv_timeout(limit) {
            Ok(Ok(reply)) => serde_json::from_str(&reply)
                .map_err(|e| RunnerError::Protocol(format!("non-JSON output {reply:?}: {e}"))),
            Ok(Err(e)) => Err(RunnerError::Protocol(format!("reading child output: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(RunnerError::Timeout(limit)),
            Err(RecvTimeoutError::Disconnected) => {
                let _ = self.child.wait();
                // stderr thread may still be draining
                thread::sleep(Duration::from_millis(20));
                Err(RunnerError::Crashed {
                    stderr: self.stderr_excerpt(),
                })
            }
        }
    }
}

/// Spawns runner children as `program args...`.
pub struct ProcessRunner {
    program: String,
    args: Vec<String>,
    mode: ChildMode,
    /// Added to each request's own timeout before the child is killed.
    grace: Duration,
    idle: Mutex<VecDeque<Worker>>,
}

impl ProcessRunner {
    pub fn new(program: impl Into<String>, args: Vec<String>, mode: ChildMode) -> Self {
        Self {
            program: program.into(),
            args,
            mode,
            grace: Duration::from_millis(500),
            idle: Mutex::new(VecDeque::new()),
        }
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }

    /// Splits a shell-like command line on whitespace.
    pub fn from_command_line(cmd: &str, mode: ChildMode) -> Result<Self, RunnerError> {
        let mut parts = cmd.split_whitespace().map(String::from);
        let program = parts
            .next()
            .ok_or_else(|| RunnerError::Unavailable("empty runner command".into()))?;
        Ok(Self::new(program, parts.collect(), mode))
    }
}

impl Runner for ProcessRunner {
    fn run(&self, request: &RunRequest) -> Result<RunResponse, RunnerError> {
        if request.timeout_ms == 0 {
            return Err(RunnerError::Protocol("timeout_ms must be > 0".into()));
        }
        let line = serde_json::to_string(request).expect("requests serialize");
        let limit = Duration::from_millis(request.timeout_ms) + self.grace;
        let once = self.mode == ChildMode::Once;
        let pooled = if once {
            None
        } else {
            self.idle.lock().expect("worker pool poisoned").pop_front()
        };
        let mut worker = match pooled {
            Some(w) => w,
            None => Worker::spawn(&self.program, &self.args, once)?,
        };
        let started = Instant::now();
        let result = worker.exchange(&line, limit);
        debug!("runner replied in {:?}: {:?}", started.elapsed(), result.as_ref().map(|r| r.status));
        match &result {
            Ok(_) if !once => self.idle.lock().expect("worker pool poisoned").push_back(worker),
            Ok(_) => {
                drop(worker.stdin);
                let mut child = worker.child;
                let _ = child.wait();
            }
            Err(e) => {
                if matches!(e, RunnerError::Timeout(_)) {
                    warn!("runner child killed after {limit:?}");
                }
                worker.kill();
            }
        }
        result
    }
}

impl Drop for ProcessRunner {
    fn drop(&mut self) {
        if let Ok(mut idle) = self.idle.lock() {
            for w in idle.drain(..) {
                w.kill();
            }
        }
    }
}
