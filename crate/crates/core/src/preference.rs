//! Preference dataset synthesis from weak supervision.
//!
//! Each question contributes its full entity→paths mapping as the desirable
//! example, plus one undesirable example per applicable perturbation:
//! final-hop truncation, swapping two entities' path sets, and deleting one
//! entity's path set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::write_jsonl;
use crate::error::Result;
use crate::loss::KtoConfig;
use crate::paths::{path_generation_prompt, RelationPath, WeakSupervisionRecord};

/// Topic entity → gold relation paths for one question.
pub type EntityPaths = BTreeMap<String, BTreeSet<RelationPath>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Gold,
    Truncation,
    EntitySwap,
    RelationDelete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: String,
    pub completion: String,
    /// Desirable (`true`) iff `origin` is [`Origin::Gold`].
    pub label: bool,
    pub origin: Origin,
}

/// Drops the final hop. Paths of length ≤ 1 have no non-empty truncation.
pub fn perturb_truncate(path: &RelationPath) -> Option<RelationPath> {
    if path.len() < 2 {
        return None;
    }
    Some(RelationPath(path.0[..path.len() - 1].to_vec()))
}

/// Truncates every path of length ≥ 2 in the mapping; `None` when no path is
/// long enough.
pub fn perturb_truncate_mapping(mapping: &EntityPaths) -> Option<EntityPaths> {
    let mut changed = false;
    let out = mapping
        .iter()
        .map(|(e, paths)| {
            let truncated = paths
                .iter()
                .map(|p| match perturb_truncate(p) {
                    Some(t) => {
                        changed = true;
                        t
                    }
                    None => p.clone(),
                })
                .collect();
            (e.clone(), truncated)
        })
        .collect();
    changed.then_some(out)
}

/// Exchanges the path sets of the first two entities in id order.
pub fn perturb_entity_swap(mapping: &EntityPaths) -> Option<EntityPaths> {
    let mut keys = mapping.keys();
    let (a, b) = (keys.next()?, keys.next()?);
    let mut out = mapping.clone();
    out.insert(a.clone(), mapping[b].clone());
    out.insert(b.clone(), mapping[a].clone());
    Some(out)
}

/// Removes one entity's path set, chosen by `rng`.
pub fn perturb_relation_delete<R: Rng + ?Sized>(mapping: &EntityPaths, rng: &mut R) -> Option<EntityPaths> {
    if mapping.len() < 2 {
        return None;
    }
    let victim = mapping.keys().nth(rng.random_range(0..mapping.len()))?.clone();
    let mut out = mapping.clone();
    out.remove(&victim);
    Some(out)
}

/// `"A: p1 | p2 ; B: q1"`, entities in id order, paths in sorted order.
pub fn serialize_mapping(mapping: &EntityPaths) -> String {
    mapping
        .iter()
        .map(|(e, paths)| {
            let ps: Vec<String> = paths.iter().map(ToString::to_string).collect();
            format!("{e}: {}", ps.join(" | "))
        })
        .collect::<Vec<_>>()
        .join(" ; ")
}

/// Inverse of [`serialize_mapping`].
pub fn parse_mapping(s: &str) -> EntityPaths {
    s.split(" ; ")
        .filter(|part| !part.trim().is_empty())
        .filter_map(|part| {
            let (e, rest) = part.split_once(": ")?;
            let paths = rest.split(" | ").map(RelationPath::parse).collect();
            Some((e.to_string(), paths))
        })
        .collect()
}

/// Gold supervision for one question, aggregated over its topic entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionLabel {
    pub question_id: String,
    pub question: String,
    /// Topic entities in first-seen order, used for prompt rendering.
    pub topics: Vec<String>,
    pub mapping: EntityPaths,
}

/// Groups usable records by question id, preserving first-appearance order.
pub fn group_by_question(records: &[WeakSupervisionRecord]) -> Vec<QuestionLabel> {
    let mut order: Vec<QuestionLabel> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_usable()) {
        let i = *index.entry(r.question_id.as_str()).or_insert_with(|| {
            order.push(QuestionLabel {
                question_id: r.question_id.clone(),
                question: r.question.clone(),
                topics: Vec::new(),
                mapping: EntityPaths::new(),
            });
            order.len() - 1
        });
        let label = &mut order[i];
        if !label.topics.contains(&r.topic_entity) {
            label.topics.push(r.topic_entity.clone());
        }
        label
            .mapping
            .entry(r.topic_entity.clone())
            .or_default()
            .extend(r.gold_paths.iter().cloned());
    }
    order
}

/// Positive plus perturbation negatives for every question. Negatives that
/// serialize identically to the positive are dropped.
pub fn preference_examples(labels: &[QuestionLabel], seed: u64) -> Vec<PreferenceExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for label in labels {
        let prompt = path_generation_prompt(&label.question, &label.topics);
        let positive = serialize_mapping(&label.mapping);
        let negatives = [
            (Origin::Truncation, perturb_truncate_mapping(&label.mapping)),
            (Origin::EntitySwap, perturb_entity_swap(&label.mapping)),
            (
                Origin::RelationDelete,
                perturb_relation_delete(&label.mapping, &mut rng),
            ),
        ];
        out.push(PreferenceExample {
            prompt: prompt.clone(),
            completion: positive.clone(),
            label: true,
            origin: Origin::Gold,
        });
        for (origin, mapping) in negatives {
            let Some(mapping) = mapping else { continue };
            let completion = serialize_mapping(&mapping);
            if completion == positive || completion.is_empty() {
                continue;
            }
            out.push(PreferenceExample {
                prompt: prompt.clone(),
                completion,
                label: false,
                origin,
            });
        }
    }
    out
}

/// Fine-tuning settings recorded alongside the dataset; nothing here trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub lora_targets: Vec<String>,
    pub sft_learning_rate: f64,
    pub sft_epochs: u32,
    pub kto_learning_rate: f64,
    pub kto_epochs: u32,
    pub warmup_ratio: f64,
    pub batch_size: u32,
}

impl Default for TrainingMetadata {
    fn default() -> Self {
        TrainingMetadata {
            lora_rank: 16,
            lora_alpha: 32,
            lora_dropout: 0.1,
            lora_targets: ["q_proj", "k_proj", "v_proj", "o_proj"].map(String::from).to_vec(),
            sft_learning_rate: 5e-5,
            sft_epochs: 2,
            kto_learning_rate: 1e-5,
            kto_epochs: 1,
            warmup_ratio: 0.1,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub questions: usize,
    pub positives: usize,
    pub negatives: usize,
    /// negatives / positives; absent when there are no positives.
    pub negatives_per_positive: Option<f64>,
    pub by_origin: BTreeMap<Origin, usize>,
    pub seed: u64,
    pub kto: KtoConfig<f64>,
    pub training: TrainingMetadata,
}

impl PreferenceSummary {
    pub fn from_examples(examples: &[PreferenceExample], questions: usize, seed: u64, kto: KtoConfig<f64>) -> Self {
        let mut by_origin = BTreeMap::new();
        for ex in examples {
            *by_origin.entry(ex.origin).or_insert(0) += 1;
        }
        let positives = examples.iter().filter(|e| e.label).count();
        let negatives = examples.len() - positives;
        PreferenceSummary {
            questions,
            positives,
            negatives,
            negatives_per_positive: (positives > 0).then(|| negatives as f64 / positives as f64),
            by_origin,
            seed,
            kto,
            training: TrainingMetadata::default(),
        }
    }
}

/// Writes the preference JSONL and returns its summary.
pub fn build_preference_dataset(
    records: &[WeakSupervisionRecord],
    seed: u64,
    kto: KtoConfig<f64>,
    sink: impl AsRef<Path>,
) -> Result<PreferenceSummary> {
    let labels = group_by_question(records);
    let examples = preference_examples(&labels, seed);
    write_jsonl(sink, &examples)?;
    Ok(PreferenceSummary::from_examples(&examples, labels.len(), seed, kto))
}
