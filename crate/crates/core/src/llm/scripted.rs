//! Deterministic rule-table backend for tests and offline runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, ChatBackend, ChatRequest, ChatResponse, LlmError, UsageRecord};
use crate::dataset::read_jsonl;
use crate::error::Result;

/// Response used when no rule matches and no default was given.
pub const DEFAULT_RESPONSE: &str = "";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub match_substring: String,
    pub response: String,
}

impl ScriptRule {
    pub fn new(match_substring: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule {
            match_substring: match_substring.into(),
            response: response.into(),
        }
    }
}

/// First rule whose substring occurs in the prompt wins; otherwise `default`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedOracle {
    rules: Vec<ScriptRule>,
    default: String,
    label: String,
}

impl ScriptedOracle {
    pub fn new(rules: Vec<ScriptRule>, default: impl Into<String>) -> Self {
        ScriptedOracle {
            rules,
            default: default.into(),
            label: "inline".into(),
        }
    }

    /// Loads rules from JSONL `{"match_substring", "response"}` lines.
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rules = read_jsonl(path)?;
        Ok(ScriptedOracle {
            rules,
            default: DEFAULT_RESPONSE.into(),
            label: path.display().to_string(),
        })
    }

    pub fn with_default(mut self, default: impl Into<String>) -> Self {
        self.default = default.into();
        self
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    /// The canned response for `prompt`.
    pub fn respond(&self, prompt: &str) -> &str {
        self.rules
            .iter()
            .find(|r| prompt.contains(&r.match_substring))
            .map_or(self.default.as_str(), |r| r.response.as_str())
    }
}

impl ChatBackend for ScriptedOracle {
    fn identity(&self) -> String {
        format!("scripted:{} ({} rules)", self.label, self.rules.len())
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, LlmError> {
        req.validate()?;
        let prompt = req.joined_content();
        let content = self.respond(&prompt).to_string();
        let usage = UsageRecord::call(estimate_tokens(&prompt), estimate_tokens(&content), true);
        Ok(ChatResponse { content, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_match_wins() {
        let o = ScriptedOracle::new(
            vec![
                ScriptRule::new("Topic Entities: ['Ang Lee'", "{{Path 1}}"),
                ScriptRule::new("Ang Lee", "second"),
            ],
            "fallback",
        );
        assert_eq!(o.respond("- Topic Entities: ['Ang Lee', 'Taiwan']"), "{{Path 1}}");
        assert_eq!(o.respond("about Ang Lee"), "second");
        assert_eq!(o.respond("nothing"), "fallback");
    }

    #[test]
    fn loads_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rules.jsonl");
        std::fs::write(&p, "{\"match_substring\": \"a\", \"response\": \"b\"}\n").unwrap();
        let o = ScriptedOracle::from_jsonl(&p).unwrap();
        assert_eq!(o.rules().len(), 1);
        assert_eq!(o.respond("xa"), "b");
        assert_eq!(o.respond("zz"), DEFAULT_RESPONSE);
        let r = o.complete(&ChatRequest::prompt("m", "xa yy")).unwrap();
        assert_eq!(r.usage, UsageRecord::call(2, 1, true));
    }

    #[test]
    fn deterministic_transcript() {
        let o = ScriptedOracle::new(vec![ScriptRule::new("q", "r s")], "d");
        let run = || {
            ["q1", "z", "qq"]
                .iter()
                .map(|p| o.complete(&ChatRequest::prompt("m", *p)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
