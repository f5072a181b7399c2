//! Versioned prompt templates and slot rendering.
//!
//! Templates use `{slot}` placeholders; `{{` and `}}` render as literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PathGeneration,
    ConstraintExtraction,
    PathSelection,
    ConstraintVerification,
    DirectAnswer,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::PathGeneration,
        TemplateId::ConstraintExtraction,
        TemplateId::PathSelection,
        TemplateId::ConstraintVerification,
        TemplateId::DirectAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::PathGeneration => "path_generation",
            TemplateId::ConstraintExtraction => "constraint_extraction",
            TemplateId::PathSelection => "path_selection",
            TemplateId::ConstraintVerification => "constraint_verification",
            TemplateId::DirectAnswer => "direct_answer",
        }
    }

    /// Raw template text.
    pub fn source(self) -> &'static str {
        match self {
            TemplateId::PathGeneration => include_str!("../../templates/v1/path_generation.txt"),
            TemplateId::ConstraintExtraction => {
                include_str!("../../templates/v1/constraint_extraction.txt")
            }
            TemplateId::PathSelection => include_str!("../../templates/v1/path_selection.txt"),
            TemplateId::ConstraintVerification => {
                include_str!("../../templates/v1/constraint_verification.txt")
            }
            TemplateId::DirectAnswer => include_str!("../../templates/v1/direct_answer.txt"),
        }
    }

    /// Slot names the template requires.
    pub fn slots(self) -> BTreeSet<&'static str> {
        parse(self.source())
            .expect("bundled templates are well formed")
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name),
                Piece::Text(_) => None,
            })
            .collect()
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} is missing slot {slot:?}")]
    MissingSlot { template: TemplateId, slot: String },
    #[error("template {template} has no slot {slot:?}")]
    UnknownSlot { template: TemplateId, slot: String },
    #[error("malformed template at byte {0}")]
    Malformed(usize),
}

#[derive(Debug, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn parse(src: &str) -> Result<Vec<Piece<'_>>, PromptError> {
    let bytes = src.as_bytes();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                pieces.push(Piece::Text(&src[start..i + 1]));
                i += 2;
                start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                pieces.push(Piece::Text(&src[start..i + 1]));
                i += 2;
                start = i;
            }
            b'{' => {
                pieces.push(Piece::Text(&src[start..i]));
                let close = src[i..].find('}').ok_or(PromptError::Malformed(i))? + i;
                let name = &src[i + 1..close];
                if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                    return Err(PromptError::Malformed(i));
                }
                pieces.push(Piece::Slot(name));
                i = close + 1;
                start = i;
            }
            b'}' => return Err(PromptError::Malformed(i)),
            _ => i += 1,
        }
    }
    pieces.push(Piece::Text(&src[start..]));
    pieces.retain(|p| !matches!(p, Piece::Text("")));
    Ok(pieces)
}

/// Substitutes `slots` into the template. Every template slot must be supplied
/// and every supplied slot must exist in the template.
pub fn render_prompt<K, V>(template: TemplateId, slots: &BTreeMap<K, V>) -> Result<String, PromptError>
where
    K: AsRef<str> + Ord,
    V: AsRef<str>,
{
    let wanted = template.slots();
    for key in slots.keys() {
        if !wanted.contains(key.as_ref()) {
            return Err(PromptError::UnknownSlot {
                template,
                slot: key.as_ref().to_string(),
            });
        }
    }
    let lookup: BTreeMap<&str, &str> = slots.iter().map(|(k, v)| (k.as_ref(), v.as_ref())).collect();
    let mut out = String::with_capacity(template.source().len() + 256);
    for piece in parse(template.source())? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => match lookup.get(name) {
                Some(v) => out.push_str(v),
                None => {
                    return Err(PromptError::MissingSlot {
                        template,
                        slot: name.to_string(),
                    })
                }
            },
        }
    }
    Ok(out)
}

/// Python `repr` of a string.
pub fn py_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Python `repr` of a list of strings, e.g. `['a', 'b']`.
pub fn py_list<S: AsRef<str>>(items: &[S]) -> String {
    let inner: Vec<String> = items.iter().map(|s| py_str(s.as_ref())).collect();
    format!("[{}]", inner.join(", "))
}

/// JSON string literal.
pub fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// JSON list of strings with `", "` separators, e.g. `["a", "b"]`.
pub fn json_list<S: AsRef<str>>(items: &[S]) -> String {
    let inner: Vec<String> = items.iter().map(|s| json_str(s.as_ref())).collect();
    format!("[{}]", inner.join(", "))
}

/// Selection memory as a Python list of dicts.
pub fn py_memory<'a, I>(entries: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let inner: Vec<String> = entries
        .into_iter()
        .map(|(path, feedback)| {
            format!(
                "{{'selected_path': {}, 'feedback': {}}}",
                py_str(path),
                py_str(feedback)
            )
        })
        .collect();
    format!("[{}]", inner.join(", "))
}
