//! Functional-correctness evaluation: Pass@1, CoT-Pass@1 (retry or
//! replace semantics) and relative improvement.

mod runner;

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_jsonl, CorpusError, Record};
use crate::pool::bounded_map;
use crate::textmetrics::round2;

pub use runner::{ChildMode, FnRunner, ProcessRunner, RunRequest, RunResponse, Runner, RunnerError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    /// Signature plus docstring; completions are appended to it.
    pub prompt: String,
    pub entry_point: String,
    pub tests: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_solution: Option<String>,
}

impl Record for Problem {
    const REQUIRED: &'static [&'static str] = &["id", "prompt", "entry_point", "tests"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        if self.tests.is_empty() {
            return Err("problem has no tests".into());
        }
        if self.entry_point.is_empty() || !self.prompt.contains(&self.entry_point) {
            return Err(format!("entry point {:?} does not appear in the prompt", self.entry_point));
        }
        Ok(())
    }
}

pub fn load_problems(path: &Path) -> Result<Vec<Problem>, CorpusError> {
    load_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Timeout,
    Error,
    SyntaxError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionVerdict {
    pub status: Status,
    pub per_test: Vec<bool>,
    pub wall_time_ms: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stderr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecutionVerdict {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    fn error(status: Status, message: String, stderr: String, wall: Duration) -> Self {
        Self {
            status,
            per_test: Vec::new(),
            wall_time_ms: wall.as_secs_f64() * 1e3,
            stderr,
            message: Some(message),
        }
    }

    /// Indices of failing tests.
    pub fn failing_tests(&self) -> Vec<usize> {
        self.per_test.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i).collect()
    }
}

/// Builds the source as prompt + completion and runs it. Runner failures
/// become `error`/`timeout` verdicts; a reply only counts as a pass when
/// every one of the problem's tests is reported passing.
pub fn run_problem(problem: &Problem, completion: &str, runner: &dyn Runner, timeout: Duration) -> ExecutionVerdict {
    let request = RunRequest {
        source: format!("{}{}", problem.prompt, completion),
        tests: problem.tests.clone(),
        entry_point: problem.entry_point.clone(),
        timeout_ms: (timeout.as_millis() as u64).max(1),
    };
    let started = Instant::now();
    let reply = runner.run(&request);
    let wall = started.elapsed();
    let resp = match reply {
        Ok(r) => r,
        Err(RunnerError::Timeout(limit)) => {
            return ExecutionVerdict::error(Status::Timeout, format!("killed after {limit:?}"), String::new(), wall)
        }
        Err(e) => return ExecutionVerdict::error(Status::Error, e.to_string(), e.stderr().to_string(), wall),
    };
    let n = problem.tests.len();
    let all_pass = resp.per_test.len() == n && resp.per_test.iter().all(|ok| *ok);
    let consistent = match resp.status {
        Status::Pass => all_pass,
        Status::Fail => resp.per_test.len() == n && !all_pass,
        _ => true,
    };
    if !consistent {
        return ExecutionVerdict::error(
            Status::Error,
            format!(
                "runner reported {:?} with per-test results {:?} for {n} tests",
                resp.status, resp.per_test
            ),
            String::new(),
            wall,
        );
    }
    let message = match (&resp.error_kind, &resp.message) {
        (Some(k), Some(m)) => Some(format!("{k}: {m}")),
        (Some(k), None) => Some(k.clone()),
        (None, m) => m.clone(),
    };
    ExecutionVerdict {
        status: resp.status,
        per_test: resp.per_test,
        wall_time_ms: wall.as_secs_f64() * 1e3,
        stderr: String::new(),
        message,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// CoT attempt only after a failed base attempt; a problem passes if
    /// either attempt passes.
    Retry,
    /// Every problem gets a CoT attempt and only that attempt counts.
    Replace,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty problem set")]
    Empty,
    #[error("{problems} problems but {candidates} candidates")]
    CandidateCount { problems: usize, candidates: usize },
    #[error("{mode:?} mode: {reason}")]
    Coverage { mode: Mode, reason: String },
}

/// 100 · passes / problems.
pub fn pass_at_1(verdicts: &[ExecutionVerdict]) -> Result<f64, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::Empty);
    }
    let passes = verdicts.iter().filter(|v| v.passed()).count();
    Ok(100.0 * passes as f64 / verdicts.len() as f64)
}

/// `cot[i]` is the CoT attempt of problem i. Retry mode requires one
/// exactly for the base failures; replace mode requires one everywhere.
pub fn cot_pass_at_1(base: &[ExecutionVerdict], cot: &[Option<ExecutionVerdict>], mode: Mode) -> Result<f64, EvalError> {
    if base.is_empty() {
        return Err(EvalError::Empty);
    }
    if base.len() != cot.len() {
        return Err(EvalError::Coverage {
            mode,
            reason: format!("{} base verdicts but {} CoT slots", base.len(), cot.len()),
        });
    }
    let mut passes = 0usize;
    for (i, (b, c)) in base.iter().zip(cot).enumerate() {
        let ok = match (mode, b.passed(), c) {
            (Mode::Retry, true, None) => true,
            (Mode::Retry, true, Some(_)) => {
                return Err(EvalError::Coverage {
                    mode,
                    reason: format!("problem {i} passed without CoT but has a CoT attempt"),
                })
            }
            (Mode::Retry, false, Some(c)) | (Mode::Replace, _, Some(c)) => c.passed(),
            (_, _, None) => {
                return Err(EvalError::Coverage {
                    mode,
                    reason: format!("problem {i} lacks a CoT attempt"),
                })
            }
        };
        passes += usize::from(ok);
    }
    Ok(100.0 * passes as f64 / base.len() as f64)
}

/// 100·(new − old)/old rounded half away from zero to two decimals;
/// `None` when old is 0.
pub fn improvement(old: f64, new: f64) -> Option<f64> {
    (old != 0.0).then(|| round2(100.0 * (new - old) / old))
}

/// "62.78%" or "n/a".
pub fn format_improvement(imp: Option<f64>) -> String {
    imp.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotCandidate {
    pub cot: String,
    /// Completion generated with the CoT in the prompt.
    pub code: String,
}

/// Supplies a CoT-guided completion for a problem on demand.
pub trait CotProvider: Send + Sync {
    fn provide(&self, problem: &Problem, base_completion: &str) -> Result<CotCandidate, String>;
}

/// Pre-generated CoT candidates keyed by problem id.
#[derive(Debug, Clone, Default)]
pub struct MapCotProvider {
    pub by_id: HashMap<String, CotCandidate>,
}

impl CotProvider for MapCotProvider {
    fn provide(&self, problem: &Problem, _: &str) -> Result<CotCandidate, String> {
        self.by_id
            .get(&problem.id)
            .cloned()
            .ok_or_else(|| format!("no CoT candidate for {}", problem.id))
    }
}

pub struct FnCotProvider<F>(pub F);

impl<F> CotProvider for FnCotProvider<F>
where
    F: Fn(&Problem, &str) -> Result<CotCandidate, String> + Send + Sync,
{
    fn provide(&self, problem: &Problem, base: &str) -> Result<CotCandidate, String> {
        (self.0)(problem, base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub problem_id: String,
    pub with_cot: bool,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
    pub verdict: ExecutionVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub id: String,
    pub base: Attempt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<Attempt>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub n_problems: usize,
    pub pass_at_1: f64,
    pub cot_pass_at_1: f64,
    pub improvement: Option<f64>,
    /// Attempts whose status is error or timeout.
    pub error_count: usize,
    /// Number of times the CoT provider was consulted.
    pub cot_invocations: usize,
    pub problems: Vec<ProblemResult>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub mode: Mode,
    pub timeout: Duration,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Retry,
            timeout: DEFAULT_TIMEOUT,
            workers: 4,
        }
    }
}

fn evaluate_one(
    problem: &Problem,
    base_code: &str,
    provider: &dyn CotProvider,
    runner: &dyn Runner,
    opts: &EvalOptions,
) -> ProblemResult {
    let base = Attempt {
        problem_id: problem.id.clone(),
        with_cot: false,
        code: base_code.to_string(),
        cot: None,
        verdict: run_problem(problem, base_code, runner, opts.timeout),
    };
    let want_cot = opts.mode == Mode::Replace || !base.verdict.passed();
    let cot = want_cot.then(|| match provider.provide(problem, base_code) {
        Ok(c) => Attempt {
            problem_id: problem.id.clone(),
            with_cot: true,
            verdict: run_problem(problem, &c.code, runner, opts.timeout),
            code: c.code,
            cot: Some(c.cot),
        },
        Err(e) => Attempt {
            problem_id: problem.id.clone(),
            with_cot: true,
            code: String::new(),
            cot: None,
            verdict: ExecutionVerdict::error(Status::Error, format!("CoT provider: {e}"), String::new(), Duration::ZERO),
        },
    });
    let passed = match &cot {
        None => base.verdict.passed(),
        Some(c) => c.verdict.passed(),
    };
    ProblemResult {
        id: problem.id.clone(),
        base,
        cot,
        passed,
    }
}

/// Runs every problem (in parallel, bounded by `opts.workers`) and
/// assembles the report in problem order.
pub fn evaluate(
    problems: &[Problem],
    base_candidates: &[String],
    provider: &dyn CotProvider,
    runner: &dyn Runner,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if problems.is_empty() {
        return Err(EvalError::Empty);
    }
    if problems.len() != base_candidates.len() {
        return Err(EvalError::CandidateCount {
            problems: problems.len(),
            candidates: base_candidates.len(),
        });
    }
    let results = bounded_map(problems, opts.workers, |i, p| {
        evaluate_one(p, &base_candidates[i], provider, runner, opts)
    });
    let base: Vec<ExecutionVerdict> = results.iter().map(|r| r.base.verdict.clone()).collect();
    let cot: Vec<Option<ExecutionVerdict>> = results.iter().map(|r| r.cot.as_ref().map(|a| a.verdict.clone())).collect();
    let p1 = pass_at_1(&base)?;
    let cp1 = cot_pass_at_1(&base, &cot, opts.mode)?;
    let is_err = |v: &ExecutionVerdict| matches!(v.status, Status::Error | Status::Timeout);
    let error_count = base.iter().filter(|v| is_err(v)).count() + cot.iter().flatten().filter(|v| is_err(v)).count();
    Ok(EvalReport {
        mode: opts.mode,
        n_problems: problems.len(),
        pass_at_1: p1,
        cot_pass_at_1: cp1,
        improvement: improvement(p1, cp1),
        error_count,
        cot_invocations: cot.iter().flatten().count(),
        problems: results,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14}{:>10}\n{:<14}{:>10.2}\n{:<14}{:>10.2}\n{:<14}{:>10}\n",
            "mode",
            format!("{:?}", self.mode).to_lowercase(),
            "Pass@1",
            self.pass_at_1,
            "CoT-Pass@1",
            self.cot_pass_at_1,
            "improvement",
            format_improvement(self.improvement),
        );
        s.push_str(&format!("{:<14}{:>10}\n", "problems", self.n_problems));
        if self.error_count > 0 {
            s.push_str(&format!("{:<14}{:>10}\n", "errors", self.error_count));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,base_status,cot_status,passed\n");
        for p in &self.problems {
            let st = |v: &ExecutionVerdict| serde_json::to_value(v.status).expect("status serializes");
            s.push_str(&format!(
                "{},{},{},{}\n",
                p.id,
                st(&p.base.verdict).as_str().unwrap_or_default(),
                p.cot.as_ref().map(|c| st(&c.verdict).as_str().unwrap_or_default().to_string()).unwrap_or_default(),
                p.passed
            ));
        }
        s
    }
}
