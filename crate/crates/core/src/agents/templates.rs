//! Fixed prompt texts. Rendering only concatenates, so nothing inside a
//! caller-supplied code or CoT is ever substituted.

use sha2::{Digest, Sha256};

pub const QUALITY_CHECKER: &str = include_str!("../../templates/quality_checker.txt");
pub const CONSISTENCY_CHECKER: &str = include_str!("../../templates/consistency_checker.txt");
pub const COT_GENERATOR: &str = include_str!("../../templates/cot_generator.txt");
pub const INSTRUCTION: &str = include_str!("../../templates/instruction.txt");
pub const DOC_CHECKER: &str = include_str!("../../templates/doc_checker.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    QualityChecker,
    ConsistencyChecker,
    CotGenerator,
    Instruction,
    DocChecker,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::QualityChecker,
        Template::ConsistencyChecker,
        Template::CotGenerator,
        Template::Instruction,
        Template::DocChecker,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Template::QualityChecker => QUALITY_CHECKER,
            Template::ConsistencyChecker => CONSISTENCY_CHECKER,
            Template::CotGenerator => COT_GENERATOR,
            Template::Instruction => INSTRUCTION,
            Template::DocChecker => DOC_CHECKER,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Template::QualityChecker => "quality_checker.txt",
            Template::ConsistencyChecker => "consistency_checker.txt",
            Template::CotGenerator => "cot_generator.txt",
            Template::Instruction => "instruction.txt",
            Template::DocChecker => "doc_checker.txt",
        }
    }
}

/// `(file name, sha256 hex)` of every shipped template.
pub fn template_checksums() -> Vec<(&'static str, String)> {
    Template::ALL
        .iter()
        .map(|t| (t.file_name(), hex::encode(Sha256::digest(t.text().as_bytes()))))
        .collect()
}

/// A1: template, blank line, code.
pub fn render_quality_prompt(code: &str) -> String {
    let mut out = String::with_capacity(QUALITY_CHECKER.len() + code.len() + 1);
    out.push_str(QUALITY_CHECKER);
    out.push('\n');
    out.push_str(code);
    out
}

/// A2: one-shot example, then `### Input: <input>\n### Output:`.
pub fn render_cot_prompt(prompt_and_signature: &str) -> String {
    let mut out = String::with_capacity(COT_GENERATOR.len() + prompt_and_signature.len() + 24);
    out.push_str(COT_GENERATOR);
    out.push_str("### Input: ");
    out.push_str(prompt_and_signature);
    out.push_str("\n### Output:");
    out
}

/// A3: template followed by labeled code and CoT sections.
pub fn render_consistency_prompt(code: &str, cot: &str) -> Result<String, super::AgentError> {
    if code.is_empty() {
        return Err(super::AgentError::Precondition("consistency check needs code"));
    }
    if cot.is_empty() {
        return Err(super::AgentError::Precondition("consistency check needs a CoT"));
    }
    Ok(format!(
        "{CONSISTENCY_CHECKER}\n### Code:\n{code}\n### Chain of Thought:\n{cot}"
    ))
}

pub fn render_doc_check_prompt(code: &str, doc: &str) -> String {
    format!("{DOC_CHECKER}\n### Code:\n{code}\n### Documentation:\n{doc}")
}
