//! Constraint extraction, verification prompts, and verdict parsing.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::instantiate::ReasoningPath;
use crate::llm::prompt::{json_list, json_str, render_prompt, TemplateId};
use crate::llm::{LlmError, Session};

/// The five predefined constraint categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Type,
    MultiEntity,
    ExplicitTime,
    ImplicitTime,
    Ordinal,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 5] = [
        ConstraintKind::Type,
        ConstraintKind::MultiEntity,
        ConstraintKind::ExplicitTime,
        ConstraintKind::ImplicitTime,
        ConstraintKind::Ordinal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::Type => "type",
            ConstraintKind::MultiEntity => "multi_entity",
            ConstraintKind::ExplicitTime => "explicit_time",
            ConstraintKind::ImplicitTime => "implicit_time",
            ConstraintKind::Ordinal => "ordinal",
        }
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A free-text condition; `kind` is `None` when no keyword rule matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: Option<ConstraintKind>,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConstraintSet {
    pub items: Vec<Constraint>,
}

impl ConstraintSet {
    /// Classifies each non-blank text.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        ConstraintSet {
            items: texts
                .iter()
                .map(|t| t.as_ref().trim())
                .filter(|t| !t.is_empty())
                .map(|t| Constraint {
                    kind: classify_constraint(t),
                    text: t.to_string(),
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|c| c.text.as_str()).collect()
    }
}

static NUMBERING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\d+[.)]\s*").expect("valid regex"));
static EXPLICIT_TIME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(1[0-9]{3}|20[0-9]{2})s?\b|\b(january|february|march|april|june|july|august|september|october|november|december)\s+\d").expect("valid regex")
});
static IMPLICIT_TIME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(when|before|after|during|while|since|until|prior to|at the time|time)\b").expect("valid regex")
});
static ORDINAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(first|last|second|third|latest|earliest|most recent|newest|oldest|youngest|largest|biggest|smallest|highest|lowest|longest|shortest|\d+(st|nd|rd|th))\b").expect("valid regex")
});
static TYPE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bshould be (an?|the)\b|\b(type|category|kind) of\b").expect("valid regex"));
static CAPITALIZED_SPAN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b\p{Lu}[\p{L}\p{N}'.-]*(?:\s+\p{Lu}[\p{L}\p{N}'.-]*)*").expect("valid regex"));

/// Keyword classification. Precedence: explicit time, implicit time,
/// ordinal, type, multi-entity.
pub fn classify_constraint(text: &str) -> Option<ConstraintKind> {
    let body = NUMBERING.replace(text, "");
    if EXPLICIT_TIME.is_match(&body) {
        return Some(ConstraintKind::ExplicitTime);
    }
    if IMPLICIT_TIME.is_match(&body) {
        return Some(ConstraintKind::ImplicitTime);
    }
    if ORDINAL.is_match(&body) {
        return Some(ConstraintKind::Ordinal);
    }
    if TYPE.is_match(&body) {
        return Some(ConstraintKind::Type);
    }
    // skip the sentence-initial word, which is capitalized regardless
    let rest = body.trim_start().split_once(char::is_whitespace).map_or("", |(_, r)| r);
    if CAPITALIZED_SPAN.find_iter(rest).count() >= 2 {
        return Some(ConstraintKind::MultiEntity);
    }
    None
}

/// Parses a JSON list of strings, ignoring prose around the outermost brackets.
pub fn parse_constraint_list(raw: &str) -> Option<Vec<String>> {
    let start = raw.find('[')?;
    let end = raw.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str::<Vec<String>>(&raw[start..=end]).ok()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConstraintError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Gateway(#[from] LlmError),
}

/// Result of extraction, plus a warning when the reply could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub constraints: ConstraintSet,
    pub calls: u32,
    pub warning: Option<String>,
}

pub fn extraction_prompt(question: &str) -> String {
    let slots = BTreeMap::from([("question", question)]);
    render_prompt(TemplateId::ConstraintExtraction, &slots).expect("extraction slots are complete")
}

/// One gateway call, plus one retry if `allow_retry` and the reply is not a
/// list; an unparseable reply after that yields the empty set.
pub fn extract_constraints(
    question: &str,
    session: &mut Session<'_>,
    allow_retry: bool,
) -> Result<Extraction, ConstraintError> {
    if question.trim().is_empty() {
        return Err(ConstraintError::EmptyQuestion);
    }
    let prompt = extraction_prompt(question);
    let attempts = if allow_retry { 2 } else { 1 };
    for i in 1..=attempts {
        let raw = session.call(TemplateId::ConstraintExtraction, prompt.clone())?;
        if let Some(texts) = parse_constraint_list(&raw) {
            return Ok(Extraction {
                constraints: ConstraintSet::from_texts(&texts),
                calls: i,
                warning: None,
            });
        }
    }
    Ok(Extraction {
        constraints: ConstraintSet::default(),
        calls: attempts,
        warning: Some("unparseable constraint list; continuing without constraints".into()),
    })
}

/// Parsed verifier reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub answers: Vec<String>,
    pub sufficient: bool,
    pub reason: String,
}

pub const UNPARSEABLE_REASON: &str = "unparseable verdict";

impl VerificationVerdict {
    /// The fail-closed verdict.
    pub fn unparseable() -> Self {
        VerificationVerdict {
            answers: Vec::new(),
            sufficient: false,
            reason: UNPARSEABLE_REASON.into(),
        }
    }

    pub fn rejected(reason: impl Into<String>) -> Self {
        VerificationVerdict {
            answers: Vec::new(),
            sufficient: false,
            reason: reason.into(),
        }
    }

    /// 𝒥: 1 iff the path was judged sufficient.
    pub fn is_verified(&self) -> bool {
        self.sufficient
    }

    /// Wire form, e.g. `{"answer": ["x"], "sufficient": "Yes", "reason": "..."}`.
    pub fn to_wire(&self) -> String {
        format!(
            "{{\"answer\": {}, \"sufficient\": {}, \"reason\": {}}}",
            json_list(&self.answers),
            json_str(if self.sufficient { "Yes" } else { "No" }),
            json_str(&self.reason)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerdictError {
    #[error("no JSON object found")]
    NoObject,
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("missing key {0:?}")]
    MissingKey(&'static str),
    #[error("unexpected key {0:?}")]
    UnexpectedKey(String),
    #[error("key {0:?} has the wrong type")]
    WrongType(&'static str),
    #[error("sufficient must be Yes or No, got {0:?}")]
    BadSufficiency(String),
    #[error("sufficient verdict without answers")]
    EmptyAnswers,
}

fn outer_object(raw: &str) -> Result<&str, VerdictError> {
    let start = raw.find('{').ok_or(VerdictError::NoObject)?;
    let end = raw.rfind('}').ok_or(VerdictError::NoObject)?;
    if end < start {
        return Err(VerdictError::NoObject);
    }
    Ok(&raw[start..=end])
}

/// Strict parse of `{"answer": [...], "sufficient": "Yes"/"No", "reason": "..."}`
/// after stripping prose outside the outermost braces.
pub fn parse_verdict(raw: &str) -> Result<VerificationVerdict, VerdictError> {
    let obj = outer_object(raw)?;
    let value: Value = match serde_json::from_str(obj) {
        Ok(v) => v,
        // a doubled-brace wrapper copied from the escaped template
        Err(e) => match obj.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(inner) if inner.starts_with('{') && inner.ends_with('}') => {
                serde_json::from_str(inner).map_err(|e| VerdictError::Json(e.to_string()))?
            }
            _ => return Err(VerdictError::Json(e.to_string())),
        },
    };
    let map = value.as_object().ok_or(VerdictError::NoObject)?;
    for key in map.keys() {
        if !matches!(key.as_str(), "answer" | "sufficient" | "reason") {
            return Err(VerdictError::UnexpectedKey(key.clone()));
        }
    }
    let answers = map
        .get("answer")
        .ok_or(VerdictError::MissingKey("answer"))?
        .as_array()
        .ok_or(VerdictError::WrongType("answer"))?
        .iter()
        .map(|v| v.as_str().map(str::to_string).ok_or(VerdictError::WrongType("answer")))
        .collect::<Result<Vec<_>, _>>()?;
    let sufficient = map
        .get("sufficient")
        .ok_or(VerdictError::MissingKey("sufficient"))?
        .as_str()
        .ok_or(VerdictError::WrongType("sufficient"))?;
    let sufficient = match sufficient.trim().to_ascii_lowercase().as_str() {
        "yes" => true,
        "no" => false,
        _ => return Err(VerdictError::BadSufficiency(sufficient.to_string())),
    };
    let reason = map
        .get("reason")
        .ok_or(VerdictError::MissingKey("reason"))?
        .as_str()
        .ok_or(VerdictError::WrongType("reason"))?
        .to_string();
    if sufficient && answers.is_empty() {
        return Err(VerdictError::EmptyAnswers);
    }
    Ok(VerificationVerdict {
        answers,
        sufficient,
        reason,
    })
}

/// Groundings as nested triplet lists: paths, then instantiations, then triples.
pub fn render_knowledge_triplets(groundings: &[ReasoningPath]) -> String {
    let insts: Vec<String> = groundings
        .iter()
        .map(|p| {
            let triples: Vec<String> = p.triples().map(|(h, r, t)| json_list(&[h, r, t])).collect();
            format!("[{}]", triples.join(", "))
        })
        .collect();
    format!("[[{}]]", insts.join(","))
}

/// What the verifier is shown for one candidate.
#[derive(Debug, Clone, Copy)]
pub struct VerificationInput<'a> {
    pub question: &'a str,
    pub topic_entities: &'a [String],
    pub constraints: &'a ConstraintSet,
    /// Masked rendering of the relation path from its topic entity.
    pub relation_path: &'a str,
    pub groundings: &'a [ReasoningPath],
}

pub fn verification_prompt(input: &VerificationInput<'_>) -> String {
    let slots = BTreeMap::from([
        ("question", input.question.to_string()),
        ("topic_entities", json_list(input.topic_entities)),
        ("constraints", json_list(&input.constraints.texts())),
        ("reasoning_paths", json_list(&[input.relation_path])),
        ("knowledge_triplets", render_knowledge_triplets(input.groundings)),
    ]);
    render_prompt(TemplateId::ConstraintVerification, &slots).expect("verification slots are complete")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub verdict: VerificationVerdict,
    pub calls: u32,
    pub parse_error: Option<VerdictError>,
}

/// One verifier call, retried once when `allow_retry` and the reply does not
/// parse; still unparseable means the fail-closed verdict.
pub fn verify_path(
    input: &VerificationInput<'_>,
    session: &mut Session<'_>,
    allow_retry: bool,
) -> Result<Verification, LlmError> {
    let prompt = verification_prompt(input);
    let attempts = if allow_retry { 2 } else { 1 };
    let mut last = None;
    for i in 1..=attempts {
        let raw = session.call(TemplateId::ConstraintVerification, prompt.clone())?;
        match parse_verdict(&raw) {
            Ok(verdict) => {
                return Ok(Verification {
                    verdict,
                    calls: i,
                    parse_error: None,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Ok(Verification {
        verdict: VerificationVerdict::unparseable(),
        calls: attempts,
        parse_error: last,
    })
}

/// Constraint counts per kind over a collection of extracted sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintStats {
    pub questions: usize,
    pub questions_with_constraints: usize,
    pub constraints: usize,
    /// Keyed by kind name, plus `"unclassified"`.
    pub by_kind: BTreeMap<String, usize>,
    /// Questions containing at least one constraint of the kind.
    pub questions_by_kind: BTreeMap<String, usize>,
}

pub fn constraint_statistics(sets: &[ConstraintSet]) -> ConstraintStats {
    let mut stats = ConstraintStats {
        questions: sets.len(),
        ..ConstraintStats::default()
    };
    let key = |k: Option<ConstraintKind>| k.map_or("unclassified", ConstraintKind::as_str).to_string();
    for k in ConstraintKind::ALL.map(Some).into_iter().chain([None]) {
        stats.by_kind.insert(key(k), 0);
        stats.questions_by_kind.insert(key(k), 0);
    }
    for set in sets {
        if !set.is_empty() {
            stats.questions_with_constraints += 1;
        }
        stats.constraints += set.len();
        let mut seen = std::collections::BTreeSet::new();
        for c in &set.items {
            *stats.by_kind.entry(key(c.kind)).or_default() += 1;
            if seen.insert(key(c.kind)) {
                *stats.questions_by_kind.entry(key(c.kind)).or_default() += 1;
            }
        }
    }
    stats
}
