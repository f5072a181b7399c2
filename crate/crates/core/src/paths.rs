//! Relation paths and weak-supervision mining.
//!
//! For each (question, topic entity) pair, the gold paths are every distinct
//! relation-label sequence realized by a shortest entity path from the topic
//! entity to an answer entity within the `k`-hop subgraph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_jsonl, Question};
use crate::error::Result;
use crate::kg::KnowledgeGraph;
use crate::llm::prompt::{py_list, render_prompt, TemplateId};

/// Separator between relation names in serialized paths.
pub const PATH_SEPARATOR: &str = " -> ";

/// Ordered sequence of relation names.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationPath(pub Vec<String>);

impl RelationPath {
    pub fn new<I, S>(relations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RelationPath(relations.into_iter().map(Into::into).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn relations(&self) -> &[String] {
        &self.0
    }

    /// Parses `"r1 -> r2"`. Blank input yields the empty path.
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        if s.is_empty() {
            return RelationPath::default();
        }
        RelationPath(
            s.split("->")
                .map(str::trim)
                .filter(|r| !r.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    /// Prompt rendering from a topic entity, with every hop's entity masked:
    /// `"Ang Lee -> directed -> Unknown Entity"`.
    pub fn masked_from(&self, topic: &str) -> String {
        let mut s = topic.to_string();
        for r in &self.0 {
            s.push_str(PATH_SEPARATOR);
            s.push_str(r);
            s.push_str(PATH_SEPARATOR);
            s.push_str("Unknown Entity");
        }
        s
    }
}

impl fmt::Display for RelationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(PATH_SEPARATOR))
    }
}

/// All minimal-length relation-label sequences from `source` to `target`
/// within `k` forward hops.
///
/// Hops are unweighted, so uniform-cost search reduces to BFS; label sets are
/// then propagated forward along the shortest-path DAG restricted to nodes
/// that lie on some shortest path to `target`.
pub fn shortest_relation_paths(g: &KnowledgeGraph, source: &str, target: &str, k: usize) -> BTreeSet<RelationPath> {
    assert!(k >= 1, "k must be at least 1");
    if source == target {
        return BTreeSet::new();
    }
    let dist = g.distances_from(source, k);
    let Some(&depth) = dist.get(target) else {
        return BTreeSet::new();
    };

    // Nodes on some shortest source->target path, by layer, found backwards
    // from the target. A predecessor u of v qualifies when dist[u] + 1 == dist[v].
    let mut on_path: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); depth + 1];
    on_path[depth].insert(target);
    for layer in (1..=depth).rev() {
        let (lower, upper) = on_path.split_at_mut(layer);
        for (u, &du) in &dist {
            if du + 1 != layer {
                continue;
            }
            if g.neighbors(u).iter().any(|(_, v)| upper[0].contains(v.as_str())) {
                lower[layer - 1].insert(u);
            }
        }
    }

    let mut labels: BTreeMap<&str, BTreeSet<Vec<&str>>> = BTreeMap::new();
    labels.insert(source, BTreeSet::from([Vec::new()]));
    for layer in 0..depth {
        for &u in &on_path[layer] {
            let Some(prefixes) = labels.get(u).cloned() else {
                continue;
            };
            for (r, v) in g.neighbors(u) {
                if !on_path[layer + 1].contains(v.as_str()) {
                    continue;
                }
                let entry = labels.entry(v.as_str()).or_default();
                for p in &prefixes {
                    let mut next = p.clone();
                    next.push(r.as_str());
                    entry.insert(next);
                }
            }
        }
    }
    labels
        .remove(target)
        .unwrap_or_default()
        .into_iter()
        .map(RelationPath::new)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFlag {
    /// The topic entity, or every answer entity, is absent from the graph.
    Unlinked,
    /// No answer is reachable within `k` hops (includes answer == topic).
    NoPath,
}

/// Weak supervision for one (question, topic entity) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakSupervisionRecord {
    pub question_id: String,
    pub question: String,
    pub topic_entity: String,
    pub answer_entities: BTreeSet<String>,
    pub gold_paths: BTreeSet<RelationPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<RecordFlag>,
}

impl WeakSupervisionRecord {
    pub fn is_usable(&self) -> bool {
        self.flag.is_none() && !self.gold_paths.is_empty()
    }
}

/// One record per (question, topic entity), in input order. Flagged records
/// are kept.
pub fn extract_weak_supervision(g: &KnowledgeGraph, questions: &[Question], k: usize) -> Vec<WeakSupervisionRecord> {
    questions
        .par_iter()
        .map(|q| question_records(g, q, k))
        .collect::<Vec<_>>()
        .concat()
}

fn question_records(g: &KnowledgeGraph, q: &Question, k: usize) -> Vec<WeakSupervisionRecord> {
    let mut out = Vec::new();
    let answers: BTreeSet<String> = q.answers.iter().cloned().collect();
    for topic in &q.topic_entities {
        let linked = g.contains_entity(topic) && answers.iter().any(|a| g.contains_entity(a));
        let gold_paths: BTreeSet<RelationPath> = if linked {
            answers
                .iter()
                .flat_map(|a| shortest_relation_paths(g, topic, a, k))
                .collect()
        } else {
            BTreeSet::new()
        };
        let flag = if !linked {
            Some(RecordFlag::Unlinked)
        } else if gold_paths.is_empty() {
            Some(RecordFlag::NoPath)
        } else {
            None
        };
        out.push(WeakSupervisionRecord {
            question_id: q.id.clone(),
            question: q.question.clone(),
            topic_entity: topic.clone(),
            answer_entities: answers.clone(),
            gold_paths,
            flag,
        });
    }
    out
}

/// Path-generation instruction for a question and its topic entities.
pub fn path_generation_prompt<S: AsRef<str>>(question: &str, topic_entities: &[S]) -> String {
    let slots = BTreeMap::from([
        ("question", question.to_string()),
        ("topic_entities", py_list(topic_entities)),
    ]);
    render_prompt(TemplateId::PathGeneration, &slots).expect("path generation slots are complete")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub completion: String,
}

/// Fans each usable record out to one example per gold path.
pub fn sft_examples(records: &[WeakSupervisionRecord]) -> Vec<SftExample> {
    records
        .iter()
        .filter(|r| r.is_usable())
        .flat_map(|r| {
            let prompt = path_generation_prompt(&r.question, std::slice::from_ref(&r.topic_entity));
            r.gold_paths.iter().map(move |p| SftExample {
                prompt: prompt.clone(),
                completion: p.to_string(),
            })
        })
        .collect()
}

/// Writes the SFT JSONL and returns the number of lines written.
pub fn emit_sft_dataset(records: &[WeakSupervisionRecord], sink: impl AsRef<Path>) -> Result<usize> {
    write_jsonl(sink, &sft_examples(records))
}
