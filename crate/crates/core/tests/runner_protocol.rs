//! ProcessRunner against small `sh` children speaking the JSON-line protocol.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use cotkit::evalharness::{
    evaluate, run_problem, ChildMode, EvalOptions, FnCotProvider, ProcessRunner, RunRequest, Runner, RunnerError,
    Status,
};

fn script(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn runner(path: &PathBuf, mode: ChildMode) -> ProcessRunner {
    ProcessRunner::new("sh", vec![path.display().to_string()], mode).with_grace(Duration::from_millis(300))
}

fn request(source: &str) -> RunRequest {
    RunRequest {
        source: source.into(),
        tests: vec!["assert f(1) == 1".into()],
        entry_point: "f".into(),
        timeout_ms: 200,
    }
}

// Passes iff the request mentions PASS; reports its own pid in the message.
const WARM: &str = r#"
while IFS= read -r line; do
  case "$line" in
    *PASS*) echo "{\"status\":\"pass\",\"per_test\":[true],\"message\":\"$$\"}" ;;
    *) echo "{\"status\":\"fail\",\"per_test\":[false],\"message\":\"$$\"}" ;;
  esac
done
"#;

#[test]
fn warm_children_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let path = script(&dir, "warm.sh", WARM);
    let r = runner(&path, ChildMode::Warm);
    let a = r.run(&request("PASS")).unwrap();
    let b = r.run(&request("nope")).unwrap();
    assert_eq!(a.status, Status::Pass);
    assert_eq!(b.status, Status::Fail);
    assert_eq!(a.message, b.message, "same child served both requests");
}

#[test]
fn once_mode_spawns_fresh_children_with_flag() {
    let dir = tempfile::tempdir().unwrap();
    let path = script(
        &dir,
        "once.sh",
        r#"[ "$1" = "--once" ] || exit 3
IFS= read -r line
echo "{\"status\":\"pass\",\"per_test\":[true],\"message\":\"$$\"}"
"#,
    );
    let r = runner(&path, ChildMode::Once);
    let a = r.run(&request("x")).unwrap();
    let b = r.run(&request("x")).unwrap();
    assert_eq!(a.status, Status::Pass);
    assert_ne!(a.message, b.message);
}

#[test]
fn hung_child_is_killed_at_the_deadline() {
    let dir = tempfile::tempdir().unwrap();
    let path = script(&dir, "hang.sh", "read -r line\nsleep 30\n");
    let r = runner(&path, ChildMode::Warm);
    let start = Instant::now();
    let err = r.run(&request("x")).unwrap_err();
    assert!(matches!(err, RunnerError::Timeout(_)), "{err:?}");
    assert!(start.elapsed() < Duration::from_secs(5));

    let p = common::problem("f");
    let v = run_problem(&p, "    return x\n", &r, Duration::from_millis(100));
    assert_eq!(v.status, Status::Timeout);
    assert!(!v.passed());
}

#[test]
fn crash_surfaces_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let path = script(&dir, "crash.sh", "read -r line\necho 'boom: bad interpreter' >&2\nexit 7\n");
    let r = runner(&path, ChildMode::Warm);
    let err = r.run(&request("x")).unwrap_err();
    assert!(matches!(err, RunnerError::Crashed { .. }), "{err:?}");
    assert!(err.stderr().contains("boom"), "{err:?}");

    let v = run_problem(&common::problem("f"), "    return x\n", &r, Duration::from_millis(500));
    assert_eq!(v.status, Status::Error);
    assert!(v.stderr.contains("boom"));
}

#[test]
fn non_json_reply_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = script(&dir, "chatty.sh", "read -r line\necho 'hello there'\n");
    let err = runner(&path, ChildMode::Warm).run(&request("x")).unwrap_err();
    assert!(matches!(err, RunnerError::Protocol(_)), "{err:?}");
}

#[test]
fn missing_program_is_unavailable() {
    let r = ProcessRunner::new("/nonexistent/cotkit-runner", vec![], ChildMode::Warm);
    assert!(matches!(r.run(&request("x")), Err(RunnerError::Unavailable(_))));
}

#[test]
fn pass_without_full_per_test_results_is_not_a_pass() {
    let dir = tempfile::tempdir().unwrap();
    let path = script(
        &dir,
        "liar.sh",
        "while IFS= read -r line; do echo '{\"status\":\"pass\",\"per_test\":[]}'; done\n",
    );
    let v = run_problem(&common::problem("f"), "", &runner(&path, ChildMode::Warm), Duration::from_millis(500));
    assert_eq!(v.status, Status::Error);
}

#[test]
fn evaluation_through_a_child_process() {
    let dir = tempfile::tempdir().unwrap();
    let path = script(&dir, "warm.sh", WARM);
    let r = runner(&path, ChildMode::Warm);
    let problems: Vec<_> = (0..6).map(|i| common::problem(&format!("p{i}"))).collect();
    let base: Vec<String> = (0..6).map(|i| if i % 2 == 0 { "    return x  # PASS\n" } else { "    return 0\n" }.into()).collect();
    let provider = FnCotProvider(|_: &cotkit::evalharness::Problem, _: &str| {
        Ok(cotkit::evalharness::CotCandidate {
            cot: "How to solve:\nStep 1. Return x.".into(),
            code: "    return x  # PASS\n".into(),
        })
    });
    let opts = EvalOptions {
        timeout: Duration::from_secs(2),
        workers: 3,
        ..EvalOptions::default()
    };
    let report = evaluate(&problems, &base, &provider, &r, &opts).unwrap();
    assert_eq!(report.pass_at_1, 50.0);
    assert_eq!(report.cot_pass_at_1, 100.0);
    assert_eq!(report.improvement, Some(100.0));
    assert_eq!(report.error_count, 0);
}
