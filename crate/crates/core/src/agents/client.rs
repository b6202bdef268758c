//! Chat-completion client with bounded retries, backoff and an audit log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_yes_no, Agent, AgentError, AgentVerdict, ChatMessage, Decision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Used by the yes/no checkers (A1, A3, doc checker).
    pub checker_temperature: f64,
    /// Used by the CoT generator (A2).
    pub generator_temperature: f64,
    pub max_retries: u32,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(with = "duration_secs")]
    pub backoff_base: Duration,
    #[serde(with = "duration_secs")]
    pub backoff_cap: Duration,
    pub max_in_flight: usize,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            checker_temperature: 0.0,
            generator_temperature: 0.7,
            max_retries: 3,
            timeout: Duration::from_secs(60),
            api_key_env: "COTTON_API_KEY".into(),
            backoff_base: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(8),
            max_in_flight: 4,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.timeout.is_zero() {
            return Err(AgentError::Config("timeout must be positive".into()));
        }
        if !(self.checker_temperature >= 0.0 && self.generator_temperature >= 0.0) {
            return Err(AgentError::Config("temperature must be >= 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(AgentError::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (1-based): base·2^(attempt-1), capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.backoff_base.saturating_mul(factor).min(self.backoff_cap)
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Body of a chat-completion POST.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("network: {0}")]
    Network(String),
    #[error("timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("server error {0}: {1}")]
    Server(u16, String),
    #[error("unauthorized: {0}")]
    Auth(String),
    #[error("rejected with status {0}: {1}")]
    Rejected(u16, String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            TransportError::Network(_)
                | TransportError::Timeout
                | TransportError::RateLimited
                | TransportError::Server(..)
        )
    }

    fn into_agent_error(self) -> AgentError {
        match self {
            TransportError::Auth(m) => AgentError::Auth(m),
            TransportError::Timeout => AgentError::Timeout,
            TransportError::Rejected(code, m) => AgentError::Rejected(format!("{code}: {m}")),
            TransportError::Malformed(m) => AgentError::MalformedReply(m),
            other => AgentError::Transport(other.to_string()),
        }
    }
}

/// Sends one request and returns the assistant text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// JSON chat-completion over HTTP(S).
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &LlmClientConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| AgentError::Config(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            warn!("environment variable {} is not set; sending unauthenticated requests", config.api_key_env);
        }
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            api_key,
        })
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(TransportError::Auth(body)),
            429 => return Err(TransportError::RateLimited),
            500..=599 => return Err(TransportError::Server(status, body)),
            _ => return Err(TransportError::Rejected(status, body)),
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&body).map_err(|e| TransportError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Malformed("no choices in response".into()))
    }
}

/// One request/response pair (or failed attempt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub sample_id: String,
    pub agent: Agent,
    pub prompt_sha256: String,
    pub reply: Option<String>,
    pub verdict: Option<String>,
    /// 1-based attempt number of this request.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only log shared by concurrent calls; appends are serialized.
#[derive(Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
    sink: Mutex<Option<BufWriter<File>>>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Also streams every entry as a JSON line to `path` (appending).
    pub fn with_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Mutex::default(),
            sink: Mutex::new(Some(BufWriter::new(f))),
        })
    }

    pub fn append(&self, entry: AuditEntry) {
        if let Some(w) = self.sink.lock().expect("audit sink poisoned").as_mut() {
            let line = serde_json::to_string(&entry).expect("audit entries serialize");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                warn!("audit log write failed: {e}");
            }
        }
        self.entries.lock().expect("audit log poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().expect("audit log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("audit log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Who is asking: recorded with every audit entry.
#[derive(Debug, Clone)]
pub struct CallContext<'a> {
    pub sample_id: &'a str,
    pub agent: Agent,
}

#[derive(Clone)]
pub struct ChatClient {
    transport: Arc<dyn ChatTransport>,
    config: LlmClientConfig,
    audit: Arc<AuditLog>,
}

fn prompt_digest(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(serde_json::to_string(&m.role).expect("role serializes").as_bytes());
        h.update(b"\0");
        h.update(m.content.as_bytes());
        h.update(b"\0");
    }
    hex::encode(h.finalize())
}

impl ChatClient {
    pub fn new(
        transport: Arc<dyn ChatTransport>,
        config: LlmClientConfig,
        audit: Arc<AuditLog>,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        Ok(Self {
            transport,
            config,
            audit,
        })
    }

    pub fn http(config: LlmClientConfig, audit: Arc<AuditLog>) -> Result<Self, AgentError> {
        let transport = Arc::new(HttpTransport::new(&config)?);
        Self::new(transport, config, audit)
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.config
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    /// Sends `messages` until `interpret` accepts a reply, for at most
    /// `1 + max_retries` attempts. Transport failures that are retriable
    /// back off exponentially; rejected replies are retried immediately.
    pub fn request<T>(
        &self,
        ctx: &CallContext<'_>,
        messages: Vec<ChatMessage>,
        temperature: f64,
        interpret: impl Fn(&str) -> Result<(T, Option<String>), AgentError>,
    ) -> Result<T, AgentError> {
        if messages.iter().any(|m| m.content.is_empty()) {
            return Err(AgentError::Precondition("chat message content must be nonempty"));
        }
        let prompt_sha256 = prompt_digest(&messages);
        let request = ChatRequest {
            model: self.config.model.clone(),
            messages,
            temperature,
        };
        let attempts = self.config.max_retries.saturating_add(1);
        let mut last = None;
        for attempt in 1..=attempts {
            let mut entry = AuditEntry {
                sample_id: ctx.sample_id.to_string(),
                agent: ctx.agent,
                prompt_sha256: prompt_sha256.clone(),
                reply: None,
                verdict: None,
                attempts: attempt,
                error: None,
            };
            match self.transport.send(&request) {
                Ok(reply) => {
                    entry.reply = Some(reply.clone());
                    match interpret(&reply) {
                        Ok((value, verdict)) => {
                            entry.verdict = verdict;
                            self.audit.append(entry);
                            return Ok(value);
                        }
                        Err(e) => {
                            debug!("{} {}: attempt {attempt}: {e}", ctx.agent, ctx.sample_id);
                            entry.verdict = Some("unparseable".into());
                            entry.error = Some(e.to_string());
                            self.audit.append(entry);
                            last = Some(e);
                        }
                    }
                }
                Err(e) => {
                    entry.error = Some(e.to_string());
                    self.audit.append(entry);
                    if !e.is_retriable() {
                        return Err(e.into_agent_error());
                    }
                    debug!("{} {}: attempt {attempt}: {e}", ctx.agent, ctx.sample_id);
                    last = Some(e.into_agent_error());
                    if attempt < attempts {
                        std::thread::sleep(self.config.backoff(attempt));
                    }
                }
            }
        }
        Err(AgentError::RetriesExhausted {
            attempts,
            last: Box::new(last.expect("at least one attempt ran")),
        })
    }

    /// Free-form chat; returns the assistant text unchanged.
    pub fn chat(
        &self,
        ctx: &CallContext<'_>,
        messages: Vec<ChatMessage>,
        temperature: f64,
    ) -> Result<String, AgentError> {
        self.request(ctx, messages, temperature, |r| Ok((r.to_string(), None)))
    }

    /// A yes/no question; unparseable replies are retried like failures.
    pub fn ask_yes_no(
        &self,
        ctx: &CallContext<'_>,
        prompt: String,
    ) -> Result<AgentVerdict, AgentError> {
        self.request(
            ctx,
            vec![ChatMessage::user(prompt)],
            self.config.checker_temperature,
            |raw| {
                let v = parse_yes_no(raw)?;
                let label = match v.decision {
                    Decision::Yes => "yes",
                    Decision::No => "no",
                };
                Ok((v, Some(label.to_string())))
            },
        )
    }
}
