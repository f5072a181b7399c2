//! The online loop: plan candidates, select, instantiate, verify, and
//! backtrack with feedback until a path verifies or one candidate is left.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    extract_constraints, verify_path, ConstraintError, ConstraintSet, VerificationInput, VerificationVerdict,
};
use crate::dataset::Question;
use crate::instantiate::{
    enumerate_candidate_paths, instantiate_path, merge_candidate_pools, Candidate, CandidatePool,
    DEFAULT_INSTANTIATION_CAP,
};
use crate::kg::KnowledgeGraph;
use crate::llm::prompt::{py_list, py_memory, py_str, render_prompt, TemplateId};
use crate::llm::{parse_path_selection, ChatBackend, LlmError, Selection, Session, UsageRecord};
use crate::paths::{path_generation_prompt, RelationPath};

pub const DEFAULT_SELECTION_WINDOW: usize = 16;
/// Rendered groundings kept per trace step.
const STEP_SAMPLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerConfig {
    pub max_depth: usize,
    pub instantiation_cap: usize,
    /// Candidate paths requested per topic entity.
    pub candidate_limit: usize,
    /// Candidates shown per selection prompt.
    pub selection_window: usize,
    pub model: String,
    pub seed: u64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            max_depth: 3,
            instantiation_cap: DEFAULT_INSTANTIATION_CAP,
            candidate_limit: 8,
            selection_window: DEFAULT_SELECTION_WINDOW,
            model: "default".into(),
            seed: 0,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("max_depth", self.max_depth),
            ("instantiation_cap", self.instantiation_cap),
            ("candidate_limit", self.candidate_limit),
            ("selection_window", self.selection_window),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Source of candidate relation paths for one topic entity.
pub trait PathGenerator: Send + Sync {
    fn identity(&self) -> String;

    fn generate(
        &self,
        g: &KnowledgeGraph,
        question: &Question,
        entity: &str,
        cfg: &ReasonerConfig,
    ) -> Result<(Vec<RelationPath>, UsageRecord), LlmError>;
}

/// Deterministic enumeration of realizable label sequences.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnumerationGenerator;

impl PathGenerator for EnumerationGenerator {
    fn identity(&self) -> String {
        "enumeration".into()
    }

    fn generate(
        &self,
        g: &KnowledgeGraph,
        _question: &Question,
        entity: &str,
        cfg: &ReasonerConfig,
    ) -> Result<(Vec<RelationPath>, UsageRecord), LlmError> {
        Ok((
            enumerate_candidate_paths(g, entity, cfg.max_depth, cfg.candidate_limit),
            UsageRecord::default(),
        ))
    }
}

/// A chat endpoint serving a path generator, prompted once per topic entity.
pub struct LlmPathGenerator<B> {
    backend: B,
    model: String,
}

impl<B: ChatBackend> LlmPathGenerator<B> {
    pub fn new(backend: B, model: impl Into<String>) -> Self {
        LlmPathGenerator {
            backend,
            model: model.into(),
        }
    }
}

/// Relation paths from a generator reply: one per line or `|`/`;`
/// separated, with optional `entity:` prefixes, list punctuation, and
/// numbering.
pub fn parse_generated_paths(raw: &str, max_len: usize, limit: usize) -> Vec<RelationPath> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for piece in raw.split(['\n', '|', ';']) {
        let mut s = piece.trim();
        if let Some((head, tail)) = s.split_once(": ") {
            if !head.contains("->") {
                s = tail;
            }
        }
        let s = s.trim_matches(|c: char| c.is_whitespace() || "[]'\",".contains(c));
        let s = s
            .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')')
            .trim();
        let path = RelationPath::parse(s);
        if path.is_empty() || path.len() > max_len || path.relations().iter().any(|r| r.contains(char::is_whitespace)) {
            continue;
        }
        if seen.insert(path.clone()) {
            out.push(path);
            if out.len() == limit {
                break;
            }
        }
    }
    out
}

impl<B: ChatBackend> PathGenerator for LlmPathGenerator<B> {
    fn identity(&self) -> String {
        format!("llm:{}", self.backend.identity())
    }

    fn generate(
        &self,
        _g: &KnowledgeGraph,
        question: &Question,
        entity: &str,
        cfg: &ReasonerConfig,
    ) -> Result<(Vec<RelationPath>, UsageRecord), LlmError> {
        let mut session = Session::new(&self.backend, self.model.clone());
        let raw = session.call(
            TemplateId::PathGeneration,
            path_generation_prompt(&question.question, &[entity]),
        )?;
        Ok((
            parse_generated_paths(&raw, cfg.max_depth, cfg.candidate_limit),
            session.usage(),
        ))
    }
}

/// Candidates for every topic entity, merged round-robin.
pub fn plan_candidates(
    g: &KnowledgeGraph,
    question: &Question,
    cfg: &ReasonerConfig,
    generator: &dyn PathGenerator,
) -> Result<(CandidatePool, UsageRecord), LlmError> {
    let mut usage = UsageRecord::default();
    let mut per_entity = Vec::with_capacity(question.topic_entities.len());
    for e in &question.topic_entities {
        let (paths, u) = generator.generate(g, question, e, cfg)?;
        usage += u;
        per_entity.push((e.clone(), paths));
    }
    Ok((merge_candidate_pools(&per_entity), usage))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub selected_path: String,
    pub feedback: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectedBy {
    /// Chosen by the selection call.
    Model,
    /// Last unconsumed candidate; no selection call made.
    Singleton,
    /// Selection reply unusable; first unconsumed candidate taken.
    ParseFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Position in the candidate pool.
    pub candidate: usize,
    pub path: String,
    pub selected_by: SelectedBy,
    pub rationale: String,
    pub instantiations: usize,
    pub sample: Vec<String>,
    pub verdict: VerificationVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub question_id: String,
    pub question: String,
    pub status: TraceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub constraints: ConstraintSet,
    pub candidates: Vec<Candidate>,
    pub steps: Vec<TraceStep>,
    pub backtracks: usize,
    pub final_answers: Vec<String>,
    pub grounded: bool,
    /// Answered by the direct-generation fallback.
    pub fallback: bool,
    pub usage: UsageRecord,
    pub usage_by_stage: BTreeMap<TemplateId, UsageRecord>,
    /// Path-generator usage, kept apart from `usage`.
    pub planning_usage: UsageRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ReasoningTrace {
    fn new(q: &Question) -> Self {
        ReasoningTrace {
            question_id: q.id.clone(),
            question: q.question.clone(),
            status: TraceStatus::Completed,
            error: None,
            constraints: ConstraintSet::default(),
            candidates: Vec::new(),
            steps: Vec::new(),
            backtracks: 0,
            final_answers: Vec::new(),
            grounded: false,
            fallback: false,
            usage: UsageRecord::default(),
            usage_by_stage: BTreeMap::new(),
            planning_usage: UsageRecord::default(),
            warnings: Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        self.status == TraceStatus::Failed
    }
}

/// Answers parsed from a direct-generation reply: a JSON list if present,
/// otherwise the trimmed text as a single answer.
pub fn parse_direct_answers(raw: &str) -> Vec<String> {
    if let (Some(s), Some(e)) = (raw.find('['), raw.rfind(']')) {
        if s < e {
            if let Ok(list) = serde_json::from_str::<Vec<String>>(&raw[s..=e]) {
                return list
                    .into_iter()
                    .map(|a| a.trim().to_string())
                    .filter(|a| !a.is_empty())
                    .collect();
            }
        }
    }
    let t = raw.trim();
    if t.is_empty() {
        Vec::new()
    } else {
        vec![t.to_string()]
    }
}

fn selection_prompt(q: &Question, pool: &CandidatePool, window: &[usize], memory: &[MemoryEntry]) -> String {
    let paths: Vec<String> = window
        .iter()
        .enumerate()
        .map(|(i, &idx)| format!("Path {}: {}", i + 1, pool.candidates()[idx].masked()))
        .collect();
    let slots = BTreeMap::from([
        ("question", q.question.clone()),
        ("topic_entities", py_list(&q.topic_entities)),
        (
            "memory",
            py_memory(memory.iter().map(|m| (m.selected_path.as_str(), m.feedback.as_str()))),
        ),
        (
            "reasoning_paths",
            format!("[{}]", paths.iter().map(|p| py_str(p)).collect::<Vec<_>>().join(", ")),
        ),
    ]);
    render_prompt(TemplateId::PathSelection, &slots).expect("selection slots are complete")
}

fn direct_prompt(q: &Question) -> String {
    let slots = BTreeMap::from([
        ("question", q.question.clone()),
        ("topic_entities", py_list(&q.topic_entities)),
    ]);
    render_prompt(TemplateId::DirectAnswer, &slots).expect("direct-answer slots are complete")
}

enum Step {
    Continue,
    Done,
    Fallback,
}

struct Loop<'s, 'b> {
    g: &'s KnowledgeGraph,
    q: &'s Question,
    cfg: &'s ReasonerConfig,
    session: Session<'b>,
    trace: ReasoningTrace,
    pool: CandidatePool,
    memory: Vec<MemoryEntry>,
    /// Parse retries still affordable within the per-question call bound.
    retries: u32,
}

impl Loop<'_, '_> {
    fn take_retry(&mut self) -> bool {
        if self.retries > 0 {
            self.retries -= 1;
            true
        } else {
            false
        }
    }

    fn choose(&mut self) -> Result<Option<(usize, SelectedBy, String)>, LlmError> {
        let unconsumed = self.pool.unconsumed();
        if unconsumed.len() == 1 {
            return Ok(Some((unconsumed[0], SelectedBy::Singleton, String::new())));
        }
        let window = &unconsumed[..unconsumed.len().min(self.cfg.selection_window)];
        let prompt = selection_prompt(self.q, &self.pool, window, &self.memory);
        let mut raw = self.session.call(TemplateId::PathSelection, prompt.clone())?;
        let mut parsed = parse_path_selection(&raw, window.len());
        if parsed.is_err() && self.take_retry() {
            raw = self.session.call(TemplateId::PathSelection, prompt)?;
            parsed = parse_path_selection(&raw, window.len());
        }
        match parsed {
            Ok(Selection::Path { index, rationale }) => Ok(Some((window[index - 1], SelectedBy::Model, rationale))),
            Ok(Selection::NoPath { rationale }) => {
                self.trace
                    .warnings
                    .push(format!("selection declined all paths: {rationale}"));
                Ok(None)
            }
            Err(e) => {
                self.trace
                    .warnings
                    .push(format!("unusable selection ({e}); taking first unconsumed candidate"));
                Ok(Some((window[0], SelectedBy::ParseFallback, String::new())))
            }
        }
    }

    fn step(&mut self) -> Result<Step, LlmError> {
        let Some((idx, selected_by, rationale)) = self.choose()? else {
            return Ok(Step::Fallback);
        };
        let last = selected_by == SelectedBy::Singleton;
        self.pool.consume(idx);
        let cand = self.pool.candidates()[idx].clone();
        let masked = cand.masked();
        let groundings = instantiate_path(self.g, &cand.entity, &cand.path, self.cfg.instantiation_cap);
        let mut verdict = if groundings.is_empty() {
            VerificationVerdict::rejected(format!(
                "The path {masked} has no instantiation in the knowledge graph."
            ))
        } else {
            let input = VerificationInput {
                question: &self.q.question,
                topic_entities: &self.q.topic_entities,
                constraints: &self.trace.constraints,
                relation_path: &masked,
                groundings: &groundings,
            };
            let allow = self.retries > 0;
            let v = verify_path(&input, &mut self.session, allow)?;
            if v.calls > 1 {
                self.retries -= 1;
            }
            if let Some(e) = &v.parse_error {
                self.trace
                    .warnings
                    .push(format!("unparseable verdict for {masked}: {e}"));
            }
            v.verdict
        };
        if !verdict.sufficient && verdict.reason.trim().is_empty() {
            verdict.reason = "no reason given".into();
        }
        let verified = verdict.is_verified();
        let memory = (!verified).then(|| MemoryEntry {
            selected_path: masked.clone(),
            feedback: verdict.reason.clone(),
        });
        if let Some(m) = &memory {
            self.memory.push(m.clone());
        }
        if verified || last {
            self.trace.final_answers = verdict.answers.clone();
            self.trace.grounded = verified;
        }
        self.trace.steps.push(TraceStep {
            candidate: idx,
            path: masked,
            selected_by,
            rationale,
            instantiations: groundings.len(),
            sample: groundings.iter().take(STEP_SAMPLE).map(ToString::to_string).collect(),
            verdict,
            memory,
        });
        Ok(if verified || last { Step::Done } else { Step::Continue })
    }

    fn fallback(&mut self) -> Result<(), LlmError> {
        let raw = self.session.call(TemplateId::DirectAnswer, direct_prompt(self.q))?;
        self.trace.final_answers = parse_direct_answers(&raw);
        self.trace.grounded = false;
        self.trace.fallback = true;
        Ok(())
    }

    fn run(&mut self) -> Result<(), ConstraintError> {
        let allow = self.retries > 0;
        let ex = extract_constraints(&self.q.question, &mut self.session, allow)?;
        if ex.calls > 1 {
            self.retries -= 1;
        }
        self.trace.constraints = ex.constraints;
        self.trace.warnings.extend(ex.warning);
        if self.pool.is_empty() {
            return Ok(self.fallback()?);
        }
        loop {
            match self.step()? {
                Step::Continue => {}
                Step::Done => return Ok(()),
                Step::Fallback => return Ok(self.fallback()?),
            }
        }
    }
}

/// Runs the full loop for one question. Gateway failures yield a trace
/// with status `failed` and the steps taken so far.
pub fn answer_question(
    q: &Question,
    g: &KnowledgeGraph,
    cfg: &ReasonerConfig,
    generator: &dyn PathGenerator,
    backend: &dyn ChatBackend,
) -> ReasoningTrace {
    let mut trace = ReasoningTrace::new(q);
    let pool = match plan_candidates(g, q, cfg, generator) {
        Ok((pool, usage)) => {
            trace.planning_usage = usage;
            pool
        }
        Err(e) => {
            trace.status = TraceStatus::Failed;
            trace.error = Some(format!("planning: {e}"));
            return trace;
        }
    };
    trace.candidates = pool.candidates().to_vec();
    // Without retries the loop needs at most 2P calls (P >= 1), or 2 when
    // the pool is empty; the bound is 2 + 2P.
    let retries = if pool.is_empty() { 0 } else { 2 };
    let mut lp = Loop {
        g,
        q,
        cfg,
        session: Session::new(backend, cfg.model.clone()),
        trace,
        pool,
        memory: Vec::new(),
        retries,
    };
    if let Err(e) = lp.run() {
        lp.trace.status = TraceStatus::Failed;
        lp.trace.error = Some(e.to_string());
        lp.trace.final_answers.clear();
        lp.trace.grounded = false;
    }
    let mut trace = lp.trace;
    trace.backtracks = trace.steps.len().saturating_sub(1);
    trace.usage = lp.session.usage();
    trace.usage_by_stage = lp.session.usage_by_stage().clone();
    trace
}

/// Answers every question with at most `parallel` concurrent sessions.
/// Output order follows input order.
pub fn answer_batch(
    questions: &[Question],
    g: &KnowledgeGraph,
    cfg: &ReasonerConfig,
    generator: &dyn PathGenerator,
    backend: &dyn ChatBackend,
    parallel: usize,
) -> Result<Vec<ReasoningTrace>, rayon::ThreadPoolBuildError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build()?;
    Ok(pool.install(|| {
        questions
            .par_iter()
            .map(|q| answer_question(q, g, cfg, generator, backend))
            .collect()
    }))
}
