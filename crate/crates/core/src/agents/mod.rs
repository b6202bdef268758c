//! Multi-agent alignment: quality checker (A1), CoT generator (A2) and
//! consistency checker (A3) over a pluggable chat-completion client.

mod client;
mod pipeline;
mod templates;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    AuditEntry, AuditLog, CallContext, ChatClient, ChatRequest, ChatTransport, HttpTransport,
    LlmClientConfig, TransportError,
};
pub use pipeline::{
    align_pipeline, check_consistency, check_quality, generate_cot, humaneval_prompt,
    AgentDocChecker, AlignOptions, AlignReport, DropRecord,
};
pub use templates::{
    render_consistency_prompt, render_cot_prompt, render_doc_check_prompt, render_quality_prompt,
    template_checksums, Template, CONSISTENCY_CHECKER, COT_GENERATOR, DOC_CHECKER, INSTRUCTION,
    QUALITY_CHECKER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

/// Which agent a call belongs to; the audit log keys on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Agent {
    #[serde(rename = "A1")]
    QualityChecker,
    #[serde(rename = "A2")]
    CotGenerator,
    #[serde(rename = "A3")]
    ConsistencyChecker,
    #[serde(rename = "R2")]
    DocChecker,
    #[serde(rename = "chat")]
    Chat,
}

impl std::fmt::Display for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Agent::QualityChecker => "A1",
            Agent::CotGenerator => "A2",
            Agent::ConsistencyChecker => "A3",
            Agent::DocChecker => "R2",
            Agent::Chat => "chat",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentVerdict {
    pub decision: Decision,
    /// The model reply, verbatim.
    pub raw: String,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("reply is neither yes nor no: {raw:?}")]
    Unparseable { raw: String },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out")]
    Timeout,
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<AgentError> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
    #[error("invalid client configuration: {0}")]
    Config(String),
}

/// Case-insensitive; the first alphabetic token of the reply must be
/// exactly `yes` or `no`.
pub fn parse_yes_no(raw: &str) -> Result<AgentVerdict, AgentError> {
    let token: String = raw
        .trim_start()
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    let decision = match token.to_lowercase().as_str() {
        "yes" => Decision::Yes,
        "no" => Decision::No,
        _ => {
            return Err(AgentError::Unparseable {
                raw: raw.to_string(),
            })
        }
    };
    Ok(AgentVerdict {
        decision,
        raw: raw.to_string(),
    })
}
