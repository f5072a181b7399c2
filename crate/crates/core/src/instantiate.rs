//! Grounding relation paths into entity-level reasoning paths, and the
//! candidate pool consumed by the reasoning loop.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kg::KnowledgeGraph;
use crate::paths::{RelationPath, PATH_SEPARATOR};

/// Default bound on instantiations per relation path.
pub const DEFAULT_INSTANTIATION_CAP: usize = 32;

/// `e0 -r1-> e1 -r2-> ... el`, fully grounded in the graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
}

impl ReasoningPath {
    pub fn start(&self) -> &str {
        &self.entities[0]
    }

    pub fn end(&self) -> &str {
        self.entities.last().expect("reasoning path has at least one entity")
    }

    pub fn relation_path(&self) -> RelationPath {
        RelationPath(self.relations.clone())
    }

    /// `(head, relation, tail)` per hop.
    pub fn triples(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.relations
            .iter()
            .enumerate()
            .map(|(i, r)| (self.entities[i].as_str(), r.as_str(), self.entities[i + 1].as_str()))
    }

    /// Every hop exists in `g` and the lengths line up.
    pub fn is_valid_in(&self, g: &KnowledgeGraph) -> bool {
        self.entities.len() == self.relations.len() + 1 && self.triples().all(|(h, r, t)| g.contains_triple(h, r, t))
    }
}

impl fmt::Display for ReasoningPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.entities[0])?;
        for (r, e) in self.relations.iter().zip(&self.entities[1..]) {
            write!(f, "{PATH_SEPARATOR}{r}{PATH_SEPARATOR}{e}")?;
        }
        Ok(())
    }
}

/// Up to `cap` complete groundings of `path` from `source`, in lexicographic
/// order of their entity sequences. Partial groundings are discarded.
pub fn instantiate_path(g: &KnowledgeGraph, source: &str, path: &RelationPath, cap: usize) -> Vec<ReasoningPath> {
    assert!(cap >= 1, "cap must be at least 1");
    let mut out = Vec::new();
    let mut stack = vec![source.to_string()];
    extend(g, path.relations(), &mut stack, cap, &mut out);
    out
}

fn extend(g: &KnowledgeGraph, rels: &[String], stack: &mut Vec<String>, cap: usize, out: &mut Vec<ReasoningPath>) {
    if out.len() >= cap {
        return;
    }
    let depth = stack.len() - 1;
    if depth == rels.len() {
        out.push(ReasoningPath {
            entities: stack.clone(),
            relations: rels.to_vec(),
        });
        return;
    }
    let here = stack[depth].clone();
    for tail in g.tails(&here, &rels[depth]) {
        stack.push(tail.to_string());
        extend(g, rels, stack, cap, out);
        stack.pop();
        if out.len() >= cap {
            return;
        }
    }
}

/// Distinct relation-label sequences realizable from `source`, shortest
/// first, lexicographic within a length.
pub fn enumerate_candidate_paths(g: &KnowledgeGraph, source: &str, max_len: usize, limit: usize) -> Vec<RelationPath> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut out = Vec::new();
    if limit == 0 || !g.contains_entity(source) {
        return out;
    }
    // label sequence -> entities reachable by it
    let mut frontier: BTreeMap<Vec<&str>, BTreeSet<&str>> = BTreeMap::from([(Vec::new(), BTreeSet::from([source]))]);
    for _ in 0..max_len {
        let mut next: BTreeMap<Vec<&str>, BTreeSet<&str>> = BTreeMap::new();
        for (labels, ends) in &frontier {
            for &e in ends {
                for (r, t) in g.neighbors(e) {
                    let mut l = labels.clone();
                    l.push(r.as_str());
                    next.entry(l).or_default().insert(t.as_str());
                }
            }
        }
        for labels in next.keys() {
            out.push(RelationPath::new(labels.iter().copied()));
            if out.len() == limit {
                return out;
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: String,
    pub path: RelationPath,
}

impl Candidate {
    /// `"Ang Lee -> directed -> Unknown Entity"`.
    pub fn masked(&self) -> String {
        self.path.masked_from(&self.entity)
    }
}

/// Ordered, deduplicated candidates plus the set already tried.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    candidates: Vec<Candidate>,
    consumed: BTreeSet<usize>,
}

impl CandidatePool {
    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn get(&self, idx: usize) -> Option<&Candidate> {
        self.candidates.get(idx)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn consumed(&self) -> &BTreeSet<usize> {
        &self.consumed
    }

    /// Indices not yet tried, in pool order.
    pub fn unconsumed(&self) -> Vec<usize> {
        (0..self.candidates.len())
            .filter(|i| !self.consumed.contains(i))
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.candidates.len() - self.consumed.len()
    }

    /// Marks `idx` as tried. Returns false if it was out of range or already consumed.
    pub fn consume(&mut self, idx: usize) -> bool {
        idx < self.candidates.len() && self.consumed.insert(idx)
    }
}

/// Round-robin interleave of per-entity candidate lists, deduplicated by
/// (entity, path). Entities keep their input order.
pub fn merge_candidate_pools(per_entity: &[(String, Vec<RelationPath>)]) -> CandidatePool {
    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    let rounds = per_entity.iter().map(|(_, ps)| ps.len()).max().unwrap_or(0);
    for i in 0..rounds {
        for (entity, paths) in per_entity {
            let Some(path) = paths.get(i) else { continue };
            let c = Candidate {
                entity: entity.clone(),
                path: path.clone(),
            };
            if seen.insert(c.clone()) {
                candidates.push(c);
            }
        }
    }
    CandidatePool {
        candidates,
        consumed: BTreeSet::new(),
    }
}
