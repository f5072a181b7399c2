//! Directed triple store with a per-entity outgoing adjacency index.
//!
//! The on-disk format is TSV: `head<TAB>relation<TAB>tail`, one triple per
//! line, UTF-8. Blank lines and lines starting with `#` are skipped.
//! Compound-value (CVT) nodes are ordinary entities.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Suffix given to materialized inverse relations.
pub const INVERSE_SUFFIX: &str = ".inv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Add `tail -> relation.inv -> head` for every loaded triple.
    pub inverse_edges: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
}

/// Immutable-after-build knowledge graph.
///
/// `out_index` holds, for each head entity, its `(relation, tail)` pairs
/// sorted by relation name then tail id, with no duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: BTreeSet<String>,
    triples: BTreeSet<Triple>,
    out_index: BTreeMap<String, Vec<(String, String)>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from triples; duplicates collapse.
    ///
    /// Panics on a triple with an empty component. Use [`KnowledgeGraph::insert`]
    /// for fallible construction.
    pub fn from_triples<I>(triples: I) -> Self
    where
        I: IntoIterator<Item = Triple>,
    {
        let mut g = KnowledgeGraph::new();
        for t in triples {
            g.insert(t).expect("triple components must be non-empty");
        }
        g
    }

    /// Inserts a triple. Returns `Ok(false)` when it was already present.
    pub fn insert(&mut self, t: Triple) -> Result<bool> {
        if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
            return Err(Error::Invalid(format!("triple with empty component: {t:?}")));
        }
        if self.triples.contains(&t) {
            return Ok(false);
        }
        for id in [&t.head, &t.tail] {
            self.entities.entry(id.clone()).or_insert_with(|| Entity {
                id: id.clone(),
                label: None,
            });
        }
        self.relations.insert(t.relation.clone());
        let adj = self.out_index.entry(t.head.clone()).or_default();
        let pair = (t.relation.clone(), t.tail.clone());
        let pos = adj.binary_search(&pair).unwrap_err();
        adj.insert(pos, pair);
        self.triples.insert(t);
        Ok(true)
    }

    /// Attaches a human-readable label to an existing entity.
    pub fn set_label(&mut self, id: &str, label: impl Into<String>) -> bool {
        match self.entities.get_mut(id) {
            Some(e) => {
                e.label = Some(label.into());
                true
            }
            None => false,
        }
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn contains_entity(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    pub fn contains_triple(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.out_index
            .get(head)
            .map(|adj| {
                adj.binary_search_by(|(r, t)| (r.as_str(), t.as_str()).cmp(&(relation, tail)))
                    .is_ok()
            })
            .unwrap_or(false)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(String::as_str)
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.entities.len(),
            relations: self.relations.len(),
            triples: self.triples.len(),
        }
    }

    /// Outgoing `(relation, tail)` pairs of `id`, sorted; empty for unknown ids.
    pub fn neighbors(&self, id: &str) -> &[(String, String)] {
        self.out_index.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Tails reachable from `id` over `relation`, in sorted order.
    pub fn tails<'a>(&'a self, id: &str, relation: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        let adj = self.neighbors(id);
        let start = adj.partition_point(|(r, _)| r.as_str() < relation);
        adj[start..]
            .iter()
            .take_while(move |(r, _)| r == relation)
            .map(|(_, t)| t.as_str())
    }

    /// Forward BFS hop distances from `source`, exploring at most `max_hops` hops.
    /// The source is included at distance 0 when it exists in the graph.
    pub fn distances_from(&self, source: &str, max_hops: usize) -> HashMap<&str, usize> {
        let mut dist = HashMap::new();
        let Some((src, _)) = self.entities.get_key_value(source) else {
            return dist;
        };
        dist.insert(src.as_str(), 0);
        let mut queue = VecDeque::from([src.as_str()]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u];
            if d == max_hops {
                continue;
            }
            for (_, v) in self.neighbors(u) {
                if !dist.contains_key(v.as_str()) {
                    dist.insert(v.as_str(), d + 1);
                    queue.push_back(v.as_str());
                }
            }
        }
        dist
    }

    /// Triples reachable from `source` in at most `k` forward hops: exactly the
    /// outgoing triples of entities within `k - 1` hops.
    pub fn k_hop_subgraph(&self, source: &str, k: usize) -> KnowledgeGraph {
        assert!(k >= 1, "k must be at least 1");
        let dist = self.distances_from(source, k - 1);
        let mut heads: Vec<&str> = dist.keys().copied().collect();
        heads.sort_unstable();
        let mut sub = KnowledgeGraph::new();
        for h in heads {
            for (r, t) in self.neighbors(h) {
                sub.insert(Triple::new(h, r.as_str(), t.as_str()))
                    .expect("stored triples are valid");
            }
        }
        sub
    }

    /// Reads TSV triples from `reader`. `origin` names the source in errors.
    pub fn read_tsv<R: BufRead>(reader: R, origin: &Path, opts: LoadOptions) -> Result<Self> {
        let mut g = KnowledgeGraph::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let malformed = |message: String| Error::Malformed {
                path: origin.to_path_buf(),
                line: idx + 1,
                message,
            };
            if fields.len() != 3 {
                return Err(malformed(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(malformed("empty field".to_string()));
            }
            let (h, r, t) = (fields[0], fields[1], fields[2]);
            g.insert(Triple::new(h, r, t))?;
            if opts.inverse_edges {
                g.insert(Triple::new(t, format!("{r}{INVERSE_SUFFIX}"), h))?;
            }
        }
        Ok(g)
    }

    /// Writes every triple as a TSV line, in sorted order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
        Ok(())
    }
}

/// Loads a TSV triple file.
pub fn load_graph(path: impl AsRef<Path>, opts: LoadOptions) -> Result<KnowledgeGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    KnowledgeGraph::read_tsv(BufReader::new(file), path, opts)
}
