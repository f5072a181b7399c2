//! Answer metrics, seeded sampling, and run-level aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Question;
use crate::llm::UsageRecord;
use crate::orchestrator::ReasoningTrace;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("trace {0:?} has no gold record")]
    MissingGold(String),
    #[error("duplicate trace id {0:?}")]
    DuplicateTrace(String),
    #[error("gold record {0:?} has no answers")]
    EmptyGold(String),
    #[error("cannot sample {n} of {size} questions")]
    SampleTooLarge { n: usize, size: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Lowercase, trim, collapse inner whitespace, strip surrounding punctuation.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

fn normalized_set<S: AsRef<str>>(items: &[S]) -> BTreeSet<String> {
    items.iter().map(|s| normalize_answer(s.as_ref())).collect()
}

/// Any normalized gold answer among the predictions.
pub fn hit<G: AsRef<str>, P: AsRef<str>>(gold: &[G], predicted: &[P]) -> bool {
    let gold = normalized_set(gold);
    predicted.iter().any(|p| gold.contains(&normalize_answer(p.as_ref())))
}

/// The top prediction is a gold answer.
pub fn hits_at_1<G: AsRef<str>, P: AsRef<str>>(gold: &[G], predicted: &[P]) -> bool {
    predicted
        .first()
        .is_some_and(|p| normalized_set(gold).contains(&normalize_answer(p.as_ref())))
}

/// Set-based F1 between normalized predictions and gold answers.
pub fn f1<T: Scalar, G: AsRef<str>, P: AsRef<str>>(gold: &[G], predicted: &[P]) -> T {
    let gold = normalized_set(gold);
    let pred = normalized_set(predicted);
    if gold.is_empty() || pred.is_empty() {
        return T::zero();
    }
    let overlap = pred.intersection(&gold).count();
    if overlap == 0 {
        return T::zero();
    }
    // Harmonic mean of precision and recall, as a single division.
    T::from_count(2 * overlap) / T::from_count(pred.len() + gold.len())
}

/// Uniform sample of `n` items without replacement, in original order.
pub fn sample_questions<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>, EvalError> {
    if n > items.len() {
        return Err(EvalError::SampleTooLarge { n, size: items.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub question_id: String,
    pub gold_answers: BTreeSet<String>,
    pub predicted: Vec<String>,
    pub grounded: bool,
    pub failed: bool,
    pub usage: UsageRecord,
    pub backtracks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordScore<T> {
    pub question_id: String,
    pub hit: u8,
    pub hits_at_1: u8,
    pub f1: T,
    pub grounded: bool,
    pub failed: bool,
    pub calls: u64,
    pub total_tokens: u64,
    pub backtracks: usize,
    pub predicted: String,
    pub gold: String,
}

impl QARecord {
    /// Failed records score zero on every metric.
    pub fn score<T: Scalar>(&self) -> RecordScore<T> {
        let gold: Vec<&String> = self.gold_answers.iter().collect();
        let (h, h1, f) = if self.failed {
            (false, false, T::zero())
        } else {
            (
                hit(&gold, &self.predicted),
                hits_at_1(&gold, &self.predicted),
                f1(&gold, &self.predicted),
            )
        };
        RecordScore {
            question_id: self.question_id.clone(),
            hit: h.into(),
            hits_at_1: h1.into(),
            f1: f,
            grounded: self.grounded,
            failed: self.failed,
            calls: self.usage.calls,
            total_tokens: self.usage.total_tokens,
            backtracks: self.backtracks,
            predicted: self.predicted.join(" | "),
            gold: gold.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" | "),
        }
    }
}

/// Published per-question interaction costs of the reference system, kept
/// as comparison targets for live-endpoint runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InteractionReference {
    pub dataset: &'static str,
    pub calls: f64,
    pub input_tokens: f64,
    pub output_tokens: f64,
    pub total_tokens: f64,
}

pub const PUBLISHED_INTERACTION_COSTS: [InteractionReference; 2] = [
    InteractionReference {
        dataset: "CWQ",
        calls: 2.9,
        input_tokens: 2928.6,
        output_tokens: 186.4,
        total_tokens: 3115.0,
    },
    InteractionReference {
        dataset: "WebQSP",
        calls: 2.5,
        input_tokens: 2552.8,
        output_tokens: 146.7,
        total_tokens: 2699.5,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport<T> {
    pub n: usize,
    pub hit: T,
    pub hits_at_1: T,
    pub f1: T,
    pub avg_calls: T,
    pub avg_input_tokens: T,
    pub avg_output_tokens: T,
    pub avg_total_tokens: T,
    pub avg_backtracks: T,
    pub grounded_rate: T,
    pub failed: usize,
    /// Some token counts came from the whitespace estimator.
    pub tokens_estimated: bool,
    pub reference: Vec<InteractionReference>,
}

/// Averages over records sorted by question id, so input order is irrelevant.
pub fn aggregate<T: Scalar>(records: &[QARecord]) -> MetricsReport<T> {
    let mut sorted: Vec<&QARecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    let n = sorted.len();
    let mean = |f: &dyn Fn(&QARecord) -> T| -> T {
        if n == 0 {
            return T::zero();
        }
        sorted.iter().fold(T::zero(), |acc, r| acc + f(r)) / T::from_count(n)
    };
    let scores: BTreeMap<&str, RecordScore<T>> = sorted.iter().map(|r| (r.question_id.as_str(), r.score())).collect();
    let count = |x: u64| T::from_f64(x as f64).expect("finite");
    MetricsReport {
        n,
        hit: mean(&|r| T::from_count(scores[r.question_id.as_str()].hit.into())),
        hits_at_1: mean(&|r| T::from_count(scores[r.question_id.as_str()].hits_at_1.into())),
        f1: mean(&|r| scores[r.question_id.as_str()].f1),
        avg_calls: mean(&|r| count(r.usage.calls)),
        avg_input_tokens: mean(&|r| count(r.usage.input_tokens)),
        avg_output_tokens: mean(&|r| count(r.usage.output_tokens)),
        avg_total_tokens: mean(&|r| count(r.usage.total_tokens)),
        avg_backtracks: mean(&|r| T::from_count(r.backtracks)),
        grounded_rate: mean(&|r| if r.grounded { T::one() } else { T::zero() }),
        failed: sorted.iter().filter(|r| r.failed).count(),
        tokens_estimated: sorted.iter().any(|r| r.usage.estimated),
        reference: PUBLISHED_INTERACTION_COSTS.to_vec(),
    }
}

/// Joins traces with gold answers. Every trace id must appear once and
/// have a gold record with answers.
pub fn qa_records(traces: &[ReasoningTrace], gold: &[Question]) -> Result<Vec<QARecord>, EvalError> {
    let gold: BTreeMap<&str, &Question> = gold.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(traces.len());
    for t in traces {
        if !seen.insert(t.question_id.as_str()) {
            return Err(EvalError::DuplicateTrace(t.question_id.clone()));
        }
        let q = gold
            .get(t.question_id.as_str())
            .ok_or_else(|| EvalError::MissingGold(t.question_id.clone()))?;
        if q.answers.is_empty() {
            return Err(EvalError::EmptyGold(q.id.clone()));
        }
        out.push(QARecord {
            question_id: t.question_id.clone(),
            gold_answers: q.answers.iter().cloned().collect(),
            predicted: t.final_answers.clone(),
            grounded: t.grounded,
            failed: t.failed(),
            usage: t.usage,
            backtracks: t.backtracks,
        });
    }
    Ok(out)
}

pub fn evaluate_run<T: Scalar>(traces: &[ReasoningTrace], gold: &[Question]) -> Result<MetricsReport<T>, EvalError> {
    Ok(aggregate(&qa_records(traces, gold)?))
}

/// Per-record scores as CSV, sorted by question id.
pub fn write_record_csv<T: Scalar>(path: impl AsRef<Path>, records: &[QARecord]) -> Result<(), EvalError> {
    let mut sorted: Vec<&QARecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    let mut w = csv::Writer::from_path(path)?;
    for r in sorted {
        w.serialize(r.score::<T>())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
