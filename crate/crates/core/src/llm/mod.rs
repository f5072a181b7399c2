//! Chat-completion gateway: request/response types, usage accounting, and
//! the backend trait implemented by the HTTP client and the scripted oracle.

pub mod http;
pub mod prompt;
pub mod scripted;
pub mod selection;

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpConfig};
pub use prompt::{render_prompt, PromptError, TemplateId, TEMPLATE_VERSION};
pub use scripted::{ScriptRule, ScriptedOracle};
pub use selection::{parse_path_selection, Selection, SelectionError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// A request carrying one instruction message.
    pub fn prompt(model: impl Into<String>, content: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Concatenated message contents, used for matching and token estimates.
    pub fn joined_content(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Interaction counts. `total_tokens` is always `input_tokens + output_tokens`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
    /// At least one contributing count came from the whitespace estimator.
    #[serde(default)]
    pub estimated: bool,
}

impl UsageRecord {
    /// Usage of a single call.
    pub fn call(input_tokens: u64, output_tokens: u64, estimated: bool) -> Self {
        UsageRecord {
            calls: 1,
            input_tokens,
            output_tokens,
            total_tokens: input_tokens + output_tokens,
            estimated,
        }
    }
}

impl Add for UsageRecord {
    type Output = UsageRecord;

    fn add(self, o: UsageRecord) -> UsageRecord {
        UsageRecord {
            calls: self.calls + o.calls,
            input_tokens: self.input_tokens + o.input_tokens,
            output_tokens: self.output_tokens + o.output_tokens,
            total_tokens: self.total_tokens + o.total_tokens,
            estimated: self.estimated || o.estimated,
        }
    }
}

impl AddAssign for UsageRecord {
    fn add_assign(&mut self, o: UsageRecord) {
        *self = *self + o;
    }
}

impl std::iter::Sum for UsageRecord {
    fn sum<I: Iterator<Item = UsageRecord>>(iter: I) -> Self {
        iter.fold(UsageRecord::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: UsageRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed (HTTP {0})")]
    Auth(u16),
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// A chat-completion provider. Implementations must be usable from many
/// sessions at once.
pub trait ChatBackend: Send + Sync {
    /// Short description recorded in run manifests.
    fn identity(&self) -> String;

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(req)
    }
}

/// Whitespace token count.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// One prompt/response pair as seen by a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: TemplateId,
    pub prompt: String,
    pub response: String,
}

/// Per-question conversation state: cumulative usage, itemized by stage, and
/// the transcript of exchanges.
pub struct Session<'a> {
    backend: &'a dyn ChatBackend,
    model: String,
    temperature: f64,
    max_output_tokens: u32,
    usage: UsageRecord,
    by_stage: BTreeMap<TemplateId, UsageRecord>,
    transcript: Vec<Exchange>,
}

impl<'a> Session<'a> {
    pub fn new(backend: &'a dyn ChatBackend, model: impl Into<String>) -> Self {
        Session {
            backend,
            model: model.into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            usage: UsageRecord::default(),
            by_stage: BTreeMap::new(),
            transcript: Vec::new(),
        }
    }

    pub fn with_sampling(mut self, temperature: f64, max_output_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_output_tokens = max_output_tokens;
        self
    }

    /// Sends `prompt` and records its usage under `stage`.
    pub fn call(&mut self, stage: TemplateId, prompt: String) -> Result<String, LlmError> {
        let mut req = ChatRequest::prompt(self.model.clone(), prompt);
        req.temperature = self.temperature;
        req.max_output_tokens = self.max_output_tokens;
        req.validate()?;
        let resp = self.backend.complete(&req)?;
        self.usage += resp.usage;
        *self.by_stage.entry(stage).or_default() += resp.usage;
        let prompt = req.messages.pop().map(|m| m.content).unwrap_or_default();
        self.transcript.push(Exchange {
            stage,
            prompt,
            response: resp.content.clone(),
        });
        Ok(resp.content)
    }

    pub fn usage(&self) -> UsageRecord {
        self.usage
    }

    pub fn usage_by_stage(&self) -> &BTreeMap<TemplateId, UsageRecord> {
        &self.by_stage
    }

    pub fn transcript(&self) -> &[Exchange] {
        &self.transcript
    }

    pub fn backend_identity(&self) -> String {
        self.backend.identity()
    }
}
