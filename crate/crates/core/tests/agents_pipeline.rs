//! Alignment pipeline against a scripted chat transport.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cotkit::agents::{
    align_pipeline, check_quality, generate_cot, Agent, AgentError, AlignOptions, AuditEntry, AuditLog, ChatClient,
    ChatRequest, ChatTransport, Decision, LlmClientConfig, TransportError, CONSISTENCY_CHECKER, COT_GENERATOR,
    QUALITY_CHECKER,
};
use cotkit::corpus::{CodeSample, Origin};

/// Replies by template and by a marker word in the sample's code. Counts
/// calls per (template, marker) so flaky behaviour can be scripted.
#[derive(Default)]
struct Scripted {
    calls: Mutex<HashMap<(String, String), usize>>,
}

const MARKERS: &[&str] = &["boring", "mismatch", "flaky", "chatty", "locked", "good"];

impl ChatTransport for Scripted {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        let text = &req.messages[0].content;
        let agent = if text.starts_with(QUALITY_CHECKER) {
            "A1"
        } else if text.starts_with(COT_GENERATOR) {
            "A2"
        } else if text.starts_with(CONSISTENCY_CHECKER) {
            "A3"
        } else {
            panic!("unexpected prompt {text:?}")
        };
        let marker = MARKERS.iter().find(|m| text.contains(*m)).copied().unwrap_or("good");
        let n = {
            let mut calls = self.calls.lock().unwrap();
            let c = calls.entry((agent.to_string(), marker.to_string())).or_default();
            *c += 1;
            *c
        };
        match (agent, marker) {
            (_, "locked") => Err(TransportError::Auth("bad key".into())),
            (_, "flaky") if n <= 2 => Err(TransportError::RateLimited),
            ("A1", "boring") => Ok("No.".into()),
            ("A2", "chatty") if n == 1 => Ok("Sure, happy to help!".into()),
            ("A2", _) => Ok("Here you go.\nHow to solve:\nStep 1. Do the thing.\n".into()),
            ("A3", "mismatch") => Ok("no".into()),
            _ => Ok("Yes".into()),
        }
    }
}

fn sample(id: &str, marker: &str) -> CodeSample {
    CodeSample {
        id: id.into(),
        prompt: String::new(),
        code: format!("def {marker}_fn(x):\n    \"\"\"Handle {marker} input.\"\"\"\n    return x\n"),
        docstring: Some(format!("Handle {marker} input.")),
        origin: Origin::Other,
    }
}

fn client(audit: Arc<AuditLog>) -> ChatClient {
    let cfg = LlmClientConfig {
        backoff_base: Duration::from_millis(1),
        backoff_cap: Duration::from_millis(2),
        ..LlmClientConfig::default()
    };
    ChatClient::new(Arc::new(Scripted::default()), cfg, audit).unwrap()
}

#[test]
fn pipeline_keeps_good_samples_and_explains_drops() {
    let samples: Vec<_> = MARKERS.iter().enumerate().map(|(i, m)| sample(&format!("s{i}"), m)).collect();
    let audit = Arc::new(AuditLog::in_memory());
    let report = align_pipeline(&samples, &client(Arc::clone(&audit)), &AlignOptions::default());

    let kept: Vec<_> = report.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(kept, ["s2", "s3", "s5"], "flaky and chatty recover through retries");
    for r in &report.records {
        assert_eq!(r.cot, "How to solve:\nStep 1. Do the thing.");
        assert!(r.prompt.contains("\"\"\" Handle"), "{:?}", r.prompt);
    }

    let by_id: HashMap<_, _> = report.dropped.iter().map(|d| (d.id.as_str(), d)).collect();
    assert_eq!(by_id["s0"].agent, Agent::QualityChecker);
    assert_eq!(by_id["s1"].agent, Agent::ConsistencyChecker);
    assert_eq!(by_id["s4"].agent, Agent::QualityChecker);
    assert!(by_id["s4"].reason.contains("authentication"), "{}", by_id["s4"].reason);

    let entries = audit.entries();
    let of = |id: &str| entries.iter().filter(|e| e.sample_id == id).collect::<Vec<&AuditEntry>>();
    // auth failures are not retried
    assert_eq!(of("s4").len(), 1);
    // each agent answers the flaky sample only on its third attempt
    let flaky_a1: Vec<u32> = of("s2").iter().filter(|e| e.agent == Agent::QualityChecker).map(|e| e.attempts).collect();
    assert_eq!(flaky_a1, [1, 2, 3]);
    let chatty_a2: Vec<_> = of("s3").iter().filter(|e| e.agent == Agent::CotGenerator).map(|e| e.attempts).collect();
    assert_eq!(chatty_a2, [1, 2]);
    assert!(entries.iter().all(|e| e.prompt_sha256.len() == 64));
}

#[test]
fn disabling_the_consistency_check_never_shrinks_the_output() {
    let samples: Vec<_> = MARKERS.iter().enumerate().map(|(i, m)| sample(&format!("s{i}"), m)).collect();
    let with = align_pipeline(&samples, &client(Arc::new(AuditLog::in_memory())), &AlignOptions::default());
    let without = align_pipeline(
        &samples,
        &client(Arc::new(AuditLog::in_memory())),
        &AlignOptions {
            consistency_check: false,
            ..AlignOptions::default()
        },
    );
    assert!(without.records.len() >= with.records.len());
    assert!(without.records.iter().any(|r| r.id == "s1"));
}

#[test]
fn audit_file_is_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.jsonl");
    let audit = Arc::new(AuditLog::with_file(&path).unwrap());
    let c = client(audit);
    let v = check_quality(&c, "q", "def good(): pass").unwrap();
    assert_eq!(v.decision, Decision::Yes);
    let cot = generate_cot(&c, "g", "def good():").unwrap();
    assert!(cot.starts_with("How to solve:"));
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<AuditEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].verdict.as_deref(), Some("yes"));
    assert_eq!(lines[1].agent, Agent::CotGenerator);
}

#[test]
fn preconditions_are_checked_before_any_request() {
    let audit = Arc::new(AuditLog::in_memory());
    let c = client(Arc::clone(&audit));
    assert!(matches!(check_quality(&c, "e", ""), Err(AgentError::Precondition(_))));
    assert!(matches!(generate_cot(&c, "e", "  "), Err(AgentError::Precondition(_))));
    assert!(audit.is_empty());
}
