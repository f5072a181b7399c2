//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{estimate_tokens, ChatBackend, ChatRequest, ChatResponse, LlmError, UsageRecord};

pub const DEFAULT_API_KEY_ENV: &str = "PATHWISE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt on timeouts, 429 and 5xx.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_base_ms: 500,
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the key from `cfg.api_key_env`.
    pub fn from_env(cfg: HttpConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&cfg.api_key_env)
            .map_err(|_| LlmError::Config(format!("environment variable {} is not set", cfg.api_key_env)))?;
        Ok(Self::with_key(cfg, key))
    }

    pub fn with_key(cfg: HttpConfig, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            cfg,
            api_key: api_key.into(),
            agent,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let resp = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
                return Attempt::Transient(e.to_string())
            }
            Err(e) => return Attempt::Fatal(LlmError::Protocol(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        match status {
            200..=299 => Attempt::Done(text),
            401 | 403 => Attempt::Fatal(LlmError::Auth(status)),
            429 | 500..=599 => Attempt::Transient(format!("HTTP {status}")),
            _ => Attempt::Fatal(LlmError::Status { status, body: text }),
        }
    }
}

enum Attempt {
    Done(String),
    Transient(String),
    Fatal(LlmError),
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

fn decode(req: &ChatRequest, text: &str) -> Result<ChatResponse, LlmError> {
    let wire: WireResponse = serde_json::from_str(text).map_err(|e| LlmError::Protocol(e.to_string()))?;
    let content = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::Protocol("no choices".into()))?
        .message
        .content
        .unwrap_or_default();
    let usage = match wire.usage {
        Some(u) => UsageRecord::call(u.prompt_tokens, u.completion_tokens, false),
        None => UsageRecord::call(estimate_tokens(&req.joined_content()), estimate_tokens(&content), true),
    };
    Ok(ChatResponse { content, usage })
}

impl ChatBackend for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{} model={}", self.cfg.base_url, self.cfg.model)
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let body = json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                let wait = self.cfg.backoff_base_ms.saturating_mul(1 << (i - 1).min(16));
                tracing::debug!(attempt = i + 1, wait_ms = wait, "retrying chat completion");
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => return decode(req, &text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(msg) => {
                    tracing::warn!(attempt = i + 1, "transient failure: {msg}");
                    last = msg;
                }
            }
        }
        Err(LlmError::Exhausted { attempts, last })
    }
}
