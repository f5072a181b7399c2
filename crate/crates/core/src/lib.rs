//! Knowledge-graph question answering over mined relation-path priors.
//!
//! The offline side mines shortest relation paths between topic and answer
//! entities ([`paths`]) and turns them into SFT and preference data
//! ([`preference`], [`loss`]). The online side plans candidate paths, asks a
//! chat model to pick one, grounds it in the graph, checks it against the
//! question's constraints, and backtracks on failure ([`orchestrator`]).

pub mod constraints;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod instantiate;
pub mod kg;
pub mod llm;
pub mod loss;
pub mod orchestrator;
pub mod paths;
pub mod preference;
pub mod scalar;

pub use constraints::{parse_verdict, ConstraintKind, ConstraintSet, VerificationVerdict};
pub use dataset::{load_questions, Question};
pub use error::{Error, Result};
pub use instantiate::{instantiate_path, CandidatePool, ReasoningPath};
pub use kg::{load_graph, KnowledgeGraph, LoadOptions, Triple};
pub use llm::{ChatBackend, ScriptedOracle, Session, UsageRecord};
pub use orchestrator::{answer_question, ReasonerConfig, ReasoningTrace};
pub use paths::{shortest_relation_paths, RelationPath, WeakSupervisionRecord};
pub use scalar::Scalar;

pub type KtoConfig32 = loss::KtoConfig<f32>;
pub type KtoConfig64 = loss::KtoConfig<f64>;
pub type ScoredExample32 = loss::ScoredExample<f32>;
pub type ScoredExample64 = loss::ScoredExample<f64>;
pub type KtoOutput32 = loss::KtoOutput<f32>;
pub type KtoOutput64 = loss::KtoOutput<f64>;
pub type MetricsReport32 = eval::MetricsReport<f32>;
pub type MetricsReport64 = eval::MetricsReport<f64>;
