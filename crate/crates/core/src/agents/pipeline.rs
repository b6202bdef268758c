//! The alignment pipeline: A1 → A2 → A3 per sample.

use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::templates::{
    render_consistency_prompt, render_cot_prompt, render_doc_check_prompt, render_quality_prompt,
};
use super::{Agent, AgentError, AgentVerdict, CallContext, ChatClient, ChatMessage, Decision};
use crate::corpus::{CoTRecord, CodeSample, COT_PREFIX};
use crate::filters::{DocChecker, FilterError};
use crate::pool::bounded_map;

pub fn check_quality(client: &ChatClient, sample_id: &str, code: &str) -> Result<AgentVerdict, AgentError> {
    if code.is_empty() {
        return Err(AgentError::Precondition("quality check needs code"));
    }
    let ctx = CallContext {
        sample_id,
        agent: Agent::QualityChecker,
    };
    client.ask_yes_no(&ctx, render_quality_prompt(code))
}

pub fn check_consistency(
    client: &ChatClient,
    sample_id: &str,
    code: &str,
    cot: &str,
) -> Result<AgentVerdict, AgentError> {
    let prompt = render_consistency_prompt(code, cot)?;
    let ctx = CallContext {
        sample_id,
        agent: Agent::ConsistencyChecker,
    };
    client.ask_yes_no(&ctx, prompt)
}

/// Asks A2 for a CoT. Replies without the `How to solve:` line are
/// retried; any preamble before that line is discarded.
pub fn generate_cot(client: &ChatClient, sample_id: &str, prompt: &str) -> Result<String, AgentError> {
    if prompt.trim().is_empty() {
        return Err(AgentError::Precondition("CoT generation needs a prompt"));
    }
    let ctx = CallContext {
        sample_id,
        agent: Agent::CotGenerator,
    };
    client.request(
        &ctx,
        vec![ChatMessage::user(render_cot_prompt(prompt))],
        client.config().generator_temperature,
        |reply| match reply.find(COT_PREFIX) {
            Some(i) => Ok((reply[i..].trim_end().to_string(), Some("cot".into()))),
            None => Err(AgentError::MalformedReply(format!(
                "reply lacks {COT_PREFIX:?}"
            ))),
        },
    )
}

/// End of the `def ...:` header starting at `start`, tracking brackets
/// so that annotations like `Dict[str, int]` do not end it early.
fn signature_end(code: &str, start: usize) -> Option<usize> {
    let mut depth = 0i32;
    for (i, ch) in code[start..].char_indices() {
        match ch {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ':' if depth == 0 => return Some(start + i + 1),
            _ => {}
        }
    }
    None
}

/// HumanEval-style prompt: the sample's own prompt when present, otherwise
/// the function signature followed by its docstring.
pub fn humaneval_prompt(sample: &CodeSample) -> String {
    if !sample.prompt.trim().is_empty() {
        return sample.prompt.clone();
    }
    let start = sample
        .code
        .match_indices("def ")
        .map(|(i, _)| i)
        .find(|&i| i == 0 || sample.code[..i].ends_with('\n') || sample.code[..i].ends_with("async "));
    let header = start
        .and_then(|s| {
            let line_start = sample.code[..s].rfind('\n').map_or(0, |i| i + 1);
            signature_end(&sample.code, s).map(|e| sample.code[line_start..e].to_string())
        })
        .unwrap_or_default();
    let doc = sample.docstring.as_deref().unwrap_or("").trim();
    match (header.is_empty(), doc.is_empty()) {
        (true, true) => sample.code.clone(),
        (true, false) => doc.to_string(),
        (false, true) => header,
        (false, false) => {
            let body = doc.lines().collect::<Vec<_>>().join("\n    ");
            format!("{header}\n    \"\"\" {body}\n    \"\"\"\n")
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignOptions {
    /// Run A3; disabling it reproduces the unfiltered ablation.
    pub consistency_check: bool,
    pub max_in_flight: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            consistency_check: true,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub id: String,
    pub agent: Agent,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct AlignReport {
    pub records: Vec<CoTRecord>,
    pub dropped: Vec<DropRecord>,
}

fn align_one(client: &ChatClient, sample: &CodeSample, opts: &AlignOptions) -> Result<CoTRecord, DropRecord> {
    let drop = |agent, reason: String| DropRecord {
        id: sample.id.clone(),
        agent,
        reason,
    };
    match check_quality(client, &sample.id, &sample.code) {
        Ok(v) if v.decision == Decision::Yes => {}
        Ok(_) => return Err(drop(Agent::QualityChecker, "no educational value".into())),
        Err(e) => return Err(drop(Agent::QualityChecker, format!("error: {e}"))),
    }
    let prompt = humaneval_prompt(sample);
    let cot = generate_cot(client, &sample.id, &prompt)
        .map_err(|e| drop(Agent::CotGenerator, format!("error: {e}")))?;
    if opts.consistency_check {
        match check_consistency(client, &sample.id, &sample.code, &cot) {
            Ok(v) if v.decision == Decision::Yes => {}
            Ok(_) => return Err(drop(Agent::ConsistencyChecker, "CoT inconsistent with code".into())),
            Err(e) => return Err(drop(Agent::ConsistencyChecker, format!("error: {e}"))),
        }
    }
    Ok(CoTRecord {
        id: sample.id.clone(),
        prompt,
        cot,
        code: sample.code.clone(),
    })
}

/// Runs the three agents over every sample. Failures are isolated per
/// sample and recorded in `dropped`; survivors keep input order.
pub fn align_pipeline(samples: &[CodeSample], client: &ChatClient, opts: &AlignOptions) -> AlignReport {
    let results = bounded_map(samples, opts.max_in_flight, |_, s| align_one(client, s, opts));
    let mut report = AlignReport::default();
    for r in results {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(d) => report.dropped.push(d),
        }
    }
    info!(
        "alignment kept {} of {} samples",
        report.records.len(),
        samples.len()
    );
    report
}

/// R2 checker backed by a yes/no agent call.
pub struct AgentDocChecker {
    client: Arc<ChatClient>,
}

impl AgentDocChecker {
    pub fn new(client: Arc<ChatClient>) -> Self {
        Self { client }
    }
}

impl DocChecker for AgentDocChecker {
    fn is_consistent(&self, doc: &str, code: &str) -> Result<bool, FilterError> {
        let id = hex::encode(&Sha256::digest(code.as_bytes())[..6]);
        let ctx = CallContext {
            sample_id: &id,
            agent: Agent::DocChecker,
        };
        self.client
            .ask_yes_no(&ctx, render_doc_check_prompt(code, doc))
            .map(|v| v.decision == Decision::Yes)
            .map_err(|e| FilterError::CheckerTransport(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;

    #[test]
    fn prompt_derived_from_signature_and_doc() {
        let s = CodeSample {
            id: "x".into(),
            prompt: String::new(),
            code: "def count(xs: Dict[str, int]) -> int:\n    \"\"\"Count.\"\"\"\n    return len(xs)\n".into(),
            docstring: Some("Count the keys.".into()),
            origin: Origin::Other,
        };
        assert_eq!(
            humaneval_prompt(&s),
            "def count(xs: Dict[str, int]) -> int:\n    \"\"\" Count the keys.\n    \"\"\"\n"
        );
    }

    #[test]
    fn explicit_prompt_wins() {
        let s = CodeSample {
            id: "x".into(),
            prompt: "def f():\n    \"\"\"hi\"\"\"\n".into(),
            code: "def f():\n    return 1\n".into(),
            docstring: None,
            origin: Origin::Other,
        };
        assert_eq!(humaneval_prompt(&s), s.prompt);
    }
}
