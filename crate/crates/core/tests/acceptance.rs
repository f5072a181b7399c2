//! Acceptance checks. Runs without the libtest harness and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use pathwise_core::constraints::{parse_verdict, verify_path, VerificationInput, VerificationVerdict};
use pathwise_core::dataset::{read_jsonl, write_jsonl};
use pathwise_core::eval::{aggregate, evaluate_run, f1, hit, hits_at_1, PUBLISHED_INTERACTION_COSTS};
use pathwise_core::instantiate::instantiate_path;
use pathwise_core::llm::{ChatBackend, ChatRequest, ChatResponse, LlmError, ScriptedOracle, Session, UsageRecord};
use pathwise_core::loss::{kto_loss, sft_loss, KtoConfig, ReferencePoint};
use pathwise_core::orchestrator::{
    answer_batch, answer_question, EnumerationGenerator, LlmPathGenerator, ReasonerConfig, ReasoningTrace,
};
use pathwise_core::paths::{emit_sft_dataset, extract_weak_supervision, RecordFlag};
use pathwise_core::preference::{
    build_preference_dataset, perturb_entity_swap, perturb_relation_delete, perturb_truncate, EntityPaths,
    PreferenceExample,
};
use pathwise_core::{
    load_graph, load_questions, ConstraintSet, KnowledgeGraph, LoadOptions, Question, RelationPath, ScoredExample64,
    Triple, WeakSupervisionRecord,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:?}, limit {limit:?}"))
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/toy")
        .join(name)
}

// ---------------------------------------------------------------------------
// random graphs

type Edge = (String, String, String);

struct RandomGraph {
    graph: KnowledgeGraph,
    edges: BTreeSet<Edge>,
    entities: Vec<String>,
}

fn random_graph(rng: &mut ChaCha8Rng, max_entities: usize, max_relations: usize, density: usize) -> RandomGraph {
    let n = rng.random_range(2..=max_entities);
    let m = rng.random_range(1..=max_relations);
    let count = rng.random_range(n..=density * n);
    let entities: Vec<String> = (0..n).map(|i| format!("e{i:02}")).collect();
    let mut edges = BTreeSet::new();
    for _ in 0..count {
        let h = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        let r = rng.random_range(0..m);
        edges.insert((entities[h].clone(), format!("r{r}"), entities[t].clone()));
    }
    let graph = KnowledgeGraph::from_triples(
        edges
            .iter()
            .map(|(h, r, t)| Triple::new(h.clone(), r.clone(), t.clone())),
    );
    RandomGraph { graph, edges, entities }
}

fn adjacency(edges: &BTreeSet<Edge>) -> HashMap<&str, Vec<(&str, &str)>> {
    let mut adj: HashMap<&str, Vec<(&str, &str)>> = HashMap::new();
    for (h, r, t) in edges {
        adj.entry(h.as_str()).or_default().push((r.as_str(), t.as_str()));
    }
    adj
}

/// Every walk from `source`, level by level; for each target, the label
/// sequences of the walks that reach it at the first level it is reached.
fn brute_force_shortest(edges: &BTreeSet<Edge>, source: &str, k: usize) -> HashMap<String, BTreeSet<Vec<String>>> {
    let adj = adjacency(edges);
    let mut found: HashMap<String, BTreeSet<Vec<String>>> = HashMap::new();
    let mut walks: Vec<(&str, Vec<String>)> = vec![(source, Vec::new())];
    for _ in 0..k {
        let mut next = Vec::new();
        let mut level: HashMap<String, BTreeSet<Vec<String>>> = HashMap::new();
        for (u, labels) in &walks {
            for &(r, v) in adj.get(u).map(Vec::as_slice).unwrap_or(&[]) {
                let mut l = labels.clone();
                l.push(r.to_string());
                if v != source && !found.contains_key(v) {
                    level.entry(v.to_string()).or_default().insert(l.clone());
                }
                next.push((v, l));
            }
        }
        found.extend(level);
        walks = next;
    }
    found
}

fn shortest_path_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut pairs = 0;
    let mut reachable = 0;
    for graph_no in 0..100 {
        let rg = random_graph(&mut rng, 50, 8, 3);
        let k = rng.random_range(1..=4);
        let sources: Vec<&String> = rg.entities.choose_multiple(&mut rng, 5).collect();
        for s in sources {
            let expected = brute_force_shortest(&rg.edges, s, k);
            for t in &rg.entities {
                let got: BTreeSet<Vec<String>> = pathwise_core::shortest_relation_paths(&rg.graph, s, t, k)
                    .into_iter()
                    .map(|p| p.0)
                    .collect();
                let want = expected.get(t.as_str()).cloned().unwrap_or_default();
                ensure!(
                    got == want,
                    "graph {graph_no}, {s} -> {t}, k={k}: got {got:?}, want {want:?}"
                );
                pairs += 1;
                reachable += usize::from(!want.is_empty());
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "100 graphs, {pairs} pairs ({reachable} reachable), {:?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// instantiation

fn exhaustive_groundings(rg: &RandomGraph, source: &str, relations: &[String]) -> BTreeSet<Vec<String>> {
    let n = rg.entities.len();
    let l = relations.len();
    let mut out = BTreeSet::new();
    for code in 0..n.pow(l as u32) {
        let mut c = code;
        let mut seq = vec![source.to_string()];
        for _ in 0..l {
            seq.push(rg.entities[c % n].clone());
            c /= n;
        }
        let ok = (0..l).all(|i| {
            rg.edges
                .contains(&(seq[i].clone(), relations[i].clone(), seq[i + 1].clone()))
        });
        if ok {
            out.insert(seq);
        }
    }
    out
}

fn instantiation_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1457);
    let mut checked = 0;
    let mut groundings = 0;
    for graph_no in 0..60 {
        let rg = random_graph(&mut rng, 30, 4, 3);
        let relations: Vec<String> = rg
            .edges
            .iter()
            .map(|e| e.1.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for _ in 0..6 {
            let source = rg.entities.choose(&mut rng).unwrap().clone();
            let len = rng.random_range(1..=3);
            let path: Vec<String> = (0..len).map(|_| relations.choose(&mut rng).unwrap().clone()).collect();
            let want = exhaustive_groundings(&rg, &source, &path);
            let cap = want.len().max(1) + rng.random_range(0..3);
            let got = instantiate_path(&rg.graph, &source, &RelationPath(path.clone()), cap);
            for rp in &got {
                ensure!(rp.relations == path, "graph {graph_no}: relations changed in {rp}");
                ensure!(rp.is_valid_in(&rg.graph), "graph {graph_no}: {rp} does not revalidate");
                for (h, r, t) in rp.triples() {
                    ensure!(
                        rg.edges.contains(&(h.to_string(), r.to_string(), t.to_string())),
                        "graph {graph_no}: triple ({h}, {r}, {t}) not in edge list"
                    );
                }
            }
            let got_set: BTreeSet<Vec<String>> = got.iter().map(|rp| rp.entities.clone()).collect();
            ensure!(got_set.len() == got.len(), "graph {graph_no}: duplicate groundings");
            ensure!(
                got_set == want,
                "graph {graph_no}: {source} {path:?}: got {got_set:?}, want {want:?}"
            );
            checked += 1;
            groundings += want.len();
        }
    }
    Ok(format!("{checked} paths, {groundings} groundings"))
}

// ---------------------------------------------------------------------------
// perturbations

fn random_mapping(rng: &mut ChaCha8Rng, min_keys: usize) -> EntityPaths {
    let keys = rng.random_range(min_keys..=5);
    (0..keys)
        .map(|i| {
            let paths = (0..rng.random_range(1..=3))
                .map(|_| {
                    RelationPath(
                        (0..rng.random_range(1..=4))
                            .map(|_| format!("r{}", rng.random_range(0..5)))
                            .collect(),
                    )
                })
                .collect();
            (format!("E{i}"), paths)
        })
        .collect()
}

fn all_applicable_corpus(questions: usize) -> Vec<WeakSupervisionRecord> {
    let mut out = Vec::new();
    for q in 0..questions {
        let topics = 2 + q % 3;
        for e in 0..topics {
            out.push(WeakSupervisionRecord {
                question_id: format!("q{q:03}"),
                question: format!("question {q}"),
                topic_entity: format!("T{e}"),
                answer_entities: BTreeSet::from([format!("A{q}")]),
                gold_paths: BTreeSet::from([
                    RelationPath::new([format!("p{e}"), "via".to_string()]),
                    RelationPath::new([format!("q{e}_{q}")]),
                ]),
                flag: None,
            });
        }
    }
    out
}

fn perturbation_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e27);
    for _ in 0..500 {
        let len = rng.random_range(0..=6);
        let p = RelationPath((0..len).map(|i| format!("r{i}")).collect());
        match perturb_truncate(&p) {
            Some(t) => {
                ensure!(len >= 2, "truncated a path of length {len}");
                ensure!(!t.is_empty() && t.len() < p.len(), "not a strict prefix: {t} of {p}");
                ensure!(p.0.starts_with(&t.0), "not a prefix: {t} of {p}");
            }
            None => ensure!(len < 2, "no truncation for length {len}"),
        }

        let m = random_mapping(&mut rng, 1);
        match perturb_entity_swap(&m) {
            Some(s) => {
                ensure!(m.len() >= 2, "swap on a single key");
                ensure!(
                    perturb_entity_swap(&s).as_ref() == Some(&m),
                    "swap is not an involution on {m:?}"
                );
                ensure!(s.keys().eq(m.keys()), "swap changed the key set");
            }
            None => ensure!(m.len() < 2, "swap refused {} keys", m.len()),
        }
        match perturb_relation_delete(&m, &mut rng) {
            Some(d) => {
                ensure!(
                    d.len() + 1 == m.len(),
                    "delete went from {} to {} keys",
                    m.len(),
                    d.len()
                );
                ensure!(
                    d.iter().all(|(k, v)| m.get(k) == Some(v)),
                    "delete altered a surviving entry"
                );
            }
            None => ensure!(m.len() < 2, "delete refused {} keys", m.len()),
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sink = dir.path().join("preferences.jsonl");
    let records = all_applicable_corpus(40);
    let summary = build_preference_dataset(&records, 3, KtoConfig::default(), &sink).map_err(|e| e.to_string())?;
    let examples: Vec<PreferenceExample> = read_jsonl(&sink).map_err(|e| e.to_string())?;
    let pos = examples.iter().filter(|e| e.label).count();
    let neg = examples.len() - pos;
    ensure!(pos == 40, "{pos} positives for 40 questions");
    ensure!(neg == 3 * pos, "negatives:positives = {neg}:{pos}");
    ensure!(
        summary.negatives == neg && summary.positives == pos,
        "summary disagrees with file"
    );
    Ok(format!("500 random cases; corpus {neg}:{pos}"))
}

// ---------------------------------------------------------------------------
// losses

fn single_loss(reward: f64, z0: f64, desirable: bool, cfg: &KtoConfig<f64>) -> f64 {
    let ex = ScoredExample64::new(reward - 3.0, -3.0, desirable);
    kto_loss(&[ex], cfg, ReferencePoint::Fixed(z0)).unwrap().loss
}

fn hand_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn kto_identities() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4b70);
    let unit = KtoConfig::<f64>::default();
    for _ in 0..100 {
        let z0: f64 = rng.random_range(0.0..5.0);
        let policy: f64 = rng.random_range(-20.0..0.0);
        for desirable in [true, false] {
            let ex = ScoredExample64::new(policy, policy - z0, desirable);
            let out = kto_loss(&[ex], &unit, ReferencePoint::Fixed(ex.reward())).map_err(|e| e.to_string())?;
            ensure!(
                (out.per_example[0] - 0.5).abs() < 1e-12,
                "loss {} at r == z0",
                out.per_example[0]
            );
        }
    }

    let h = 1e-4;
    for i in 0..10 {
        let cfg = KtoConfig::new(
            rng.random_range(0.01..1.0),
            rng.random_range(0.1..3.0),
            rng.random_range(0.1..3.0),
        )
        .map_err(|e| e.to_string())?;
        let r: f64 = rng.random_range(-5.0..5.0);
        let z0: f64 = rng.random_range(0.0..3.0);
        let d_pos = single_loss(r + h, z0, true, &cfg) - single_loss(r - h, z0, true, &cfg);
        let d_neg = single_loss(r + h, z0, false, &cfg) - single_loss(r - h, z0, false, &cfg);
        ensure!(
            d_pos < 0.0,
            "point {i}: desirable loss not decreasing in reward ({d_pos})"
        );
        ensure!(
            d_neg > 0.0,
            "point {i}: undesirable loss not increasing in reward ({d_neg})"
        );
        let dz_pos = single_loss(r, z0 + h, true, &cfg) - single_loss(r, z0 - h, true, &cfg);
        let dz_neg = single_loss(r, z0 + h, false, &cfg) - single_loss(r, z0 - h, false, &cfg);
        ensure!(
            dz_pos > 0.0 && dz_neg < 0.0,
            "point {i}: wrong sign in z0 ({dz_pos}, {dz_neg})"
        );
    }

    for b in 0..20 {
        let cfg = KtoConfig::new(
            rng.random_range(0.01..1.0),
            rng.random_range(0.1..3.0),
            rng.random_range(0.1..3.0),
        )
        .map_err(|e| e.to_string())?;
        let size = rng.random_range(1..=32);
        let batch: Vec<ScoredExample64> = (0..size)
            .map(|_| {
                let ex = ScoredExample64::new(
                    rng.random_range(-30.0..0.0),
                    rng.random_range(-30.0..0.0),
                    rng.random_bool(0.5),
                );
                if rng.random_bool(0.7) {
                    ex.with_mismatched(rng.random_range(-30.0..0.0), rng.random_range(-30.0..0.0))
                } else {
                    ex
                }
            })
            .collect();
        let kl: Vec<f64> = batch
            .iter()
            .filter_map(|e| Some(e.kl_policy_logprob? - e.kl_ref_logprob?))
            .collect();
        let z0 = if kl.is_empty() {
            0.0
        } else {
            (kl.iter().sum::<f64>() / kl.len() as f64).max(0.0)
        };
        let per: Vec<f64> = batch
            .iter()
            .map(|e| {
                let r = e.policy_logprob - e.ref_logprob;
                if e.desirable {
                    cfg.lambda_p - cfg.lambda_p * hand_sigmoid(cfg.beta * (r - z0))
                } else {
                    cfg.lambda_n - cfg.lambda_n * hand_sigmoid(cfg.beta * (z0 - r))
                }
            })
            .collect();
        let loss = per.iter().sum::<f64>() / per.len() as f64;
        let out = kto_loss(&batch, &cfg, ReferencePoint::Estimate).map_err(|e| e.to_string())?;
        ensure!((out.z0 - z0).abs() < 1e-9, "batch {b}: z0 {} vs {z0}", out.z0);
        ensure!((out.loss - loss).abs() < 1e-9, "batch {b}: loss {} vs {loss}", out.loss);
        for (i, (a, e)) in out.per_example.iter().zip(&per).enumerate() {
            ensure!((a - e).abs() < 1e-9, "batch {b} example {i}: {a} vs {e}");
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "100 identity cases, 10 points, 20 batches, {:?}",
        start.elapsed()
    ))
}

fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn sft_sum() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5f7);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.random_range(0..=64);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=0.0)).collect();
        let got = sft_loss(&xs);
        let want = compensated_sum(&xs);
        let err = (got - want).abs();
        ensure!(err < 1e-12, "input {i}: {got} vs {want}");
        worst = worst.max(err);
    }
    Ok(format!("1000 sequences, max error {worst:e}"))
}

// ---------------------------------------------------------------------------
// end to end on the toy film graph

struct Toy {
    graph: KnowledgeGraph,
    questions: Vec<Question>,
    oracle: ScriptedOracle,
    generator: LlmPathGenerator<ScriptedOracle>,
    cfg: ReasonerConfig,
}

fn toy() -> Result<Toy, String> {
    let graph = load_graph(fixture("graph.tsv"), LoadOptions::default()).map_err(|e| e.to_string())?;
    let questions = load_questions(fixture("questions.jsonl")).map_err(|e| e.to_string())?;
    let oracle = ScriptedOracle::from_jsonl(fixture("oracle.jsonl")).map_err(|e| e.to_string())?;
    let gen_rules = ScriptedOracle::from_jsonl(fixture("generator.jsonl")).map_err(|e| e.to_string())?;
    let cfg = ReasonerConfig {
        max_depth: 3,
        seed: 7,
        ..ReasonerConfig::default()
    };
    Ok(Toy {
        graph,
        questions,
        oracle,
        generator: LlmPathGenerator::new(gen_rules, "scripted"),
        cfg,
    })
}

fn toy_end_to_end() -> Check {
    let start = Instant::now();
    let t = toy()?;
    let q1 = &t.questions[0];
    let trace = answer_question(q1, &t.graph, &t.cfg, &t.generator, &t.oracle);
    ensure!(!trace.failed(), "trace failed: {:?}", trace.error);
    ensure!(trace.backtracks == 1, "backtracks {}", trace.backtracks);
    ensure!(trace.grounded, "not grounded");
    ensure!(trace.steps.len() == 2, "{} steps", trace.steps.len());
    ensure!(!trace.steps[0].verdict.sufficient, "first path was accepted");
    let second = &trace.candidates[trace.steps[1].candidate].path;
    ensure!(
        second.0.starts_with(&["directed".to_string(), "won_award".to_string()]),
        "second path is {second}"
    );
    ensure!(trace.steps[1].verdict.sufficient, "second path rejected");
    let report = evaluate_run::<f64>(std::slice::from_ref(&trace), &t.questions).map_err(|e| e.to_string())?;
    ensure!(
        report.hit == 1.0 && report.hits_at_1 == 1.0 && report.f1 == 1.0,
        "hit {} h@1 {} f1 {}",
        report.hit,
        report.hits_at_1,
        report.f1
    );

    let q2 = &t.questions[1];
    let direct = answer_question(q2, &t.graph, &t.cfg, &t.generator, &t.oracle);
    ensure!(
        direct.backtracks == 0,
        "no-backtrack question backtracked {} times",
        direct.backtracks
    );
    ensure!(
        direct.usage.calls == 3,
        "no-backtrack question used {} calls",
        direct.usage.calls
    );
    ensure!(
        direct.grounded && direct.final_answers == ["Golden Lion"],
        "answers {:?}",
        direct.final_answers
    );

    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "backtracks 1, {} calls; direct question 3 calls; {:?}",
        trace.usage.calls,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// termination under adversarial oracles

#[derive(Clone, Copy, Debug)]
enum Behavior {
    AlwaysReject,
    Malformed,
    Random,
}

struct FuzzOracle {
    behavior: Behavior,
    rng: Mutex<ChaCha8Rng>,
    calls: AtomicUsize,
    answered: AtomicUsize,
}

const RANDOM_REPLIES: &[&str] = &[
    "{{no path}}",
    "{{Path 0}}",
    "{{Path 1}} - looks right",
    "{{Path 2}}",
    "{{Path 7}}",
    "{{Path 99}}",
    "{Path 3}",
    r#"{"answer": ["x"], "sufficient": "Yes", "reason": "fits"}"#,
    r#"{"answer": ["x"], "sufficient": "No", "reason": "does not fit"}"#,
    r#"{"answer": [], "sufficient": "Yes", "reason": "empty"}"#,
    r#"{"answer": ["x"], "sufficient": "No", "reason": ""}"#,
    r#"["1. The answer should be a film"]"#,
    "[]",
    "",
    "}}{{",
    "I cannot help with that.",
];

impl FuzzOracle {
    fn new(behavior: Behavior, seed: u64) -> Self {
        FuzzOracle {
            behavior,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            calls: AtomicUsize::new(0),
            answered: AtomicUsize::new(0),
        }
    }
}

impl ChatBackend for FuzzOracle {
    fn identity(&self) -> String {
        format!("fuzz:{:?}", self.behavior)
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = req.joined_content();
        let content = match self.behavior {
            Behavior::AlwaysReject => {
                if prompt.contains("Knowledge Triplets:") {
                    r#"{"answer": [], "sufficient": "No", "reason": "never enough"}"#
                } else if prompt.contains("Reasoning Paths:") {
                    "{{Path 1}}"
                } else {
                    "[]"
                }
            }
            Behavior::Malformed => "%%% not { what } you [ wanted",
            Behavior::Random => {
                let mut rng = self.rng.lock().unwrap();
                if rng.random_bool(0.03) {
                    return Err(LlmError::Protocol("injected failure".into()));
                }
                RANDOM_REPLIES.choose(&mut *rng).unwrap()
            }
        };
        self.answered.fetch_add(1, Ordering::SeqCst);
        Ok(ChatResponse {
            content: content.to_string(),
            usage: UsageRecord::call(10, 5, true),
        })
    }
}

fn termination_and_call_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57);
    let mut runs = 0;
    let mut max_pool = 0;
    let mut by_pool: BTreeMap<usize, usize> = BTreeMap::new();
    for case in 0..400 {
        let rg = random_graph(&mut rng, 20, 4, 3);
        let topics: Vec<String> = (0..rng.random_range(1..=2))
            .map(|_| {
                if rng.random_bool(0.1) {
                    "absent".to_string()
                } else {
                    rg.entities.choose(&mut rng).unwrap().clone()
                }
            })
            .collect();
        let q = Question {
            id: format!("fuzz-{case}"),
            question: "Which entity is it?".into(),
            topic_entities: topics,
            answers: vec!["x".into()],
        };
        let cfg = ReasonerConfig {
            max_depth: rng.random_range(1..=3),
            candidate_limit: rng.random_range(1..=5),
            instantiation_cap: rng.random_range(1..=8),
            ..ReasonerConfig::default()
        };
        for behavior in [Behavior::AlwaysReject, Behavior::Malformed, Behavior::Random] {
            let oracle = FuzzOracle::new(behavior, case);
            let trace = answer_question(&q, &rg.graph, &cfg, &EnumerationGenerator, &oracle);
            let p = trace.candidates.len();
            let calls = oracle.calls.load(Ordering::SeqCst);
            ensure!(p <= 10, "case {case}: pool of {p}");
            ensure!(
                trace.steps.len() <= p,
                "case {case} {behavior:?}: {} steps for pool {p}",
                trace.steps.len()
            );
            ensure!(
                calls <= 2 + 2 * p,
                "case {case} {behavior:?}: {calls} calls for pool {p}"
            );
            let answered = oracle.answered.load(Ordering::SeqCst) as u64;
            ensure!(
                answered == trace.usage.calls,
                "case {case}: usage says {}, oracle answered {answered}",
                trace.usage.calls
            );
            if matches!(behavior, Behavior::AlwaysReject) && p > 0 {
                ensure!(
                    trace.steps.len() == p,
                    "case {case}: always-reject stopped after {} of {p}",
                    trace.steps.len()
                );
            }
            runs += 1;
            max_pool = max_pool.max(p);
            *by_pool.entry(p).or_default() += 1;
        }
    }
    ensure!(by_pool.len() >= 5, "pool sizes too uniform: {by_pool:?}");
    Ok(format!("{runs} runs, pool sizes 0..={max_pool}"))
}

// ---------------------------------------------------------------------------
// metrics

const VOCAB: &[&str] = &[
    "paris",
    "rome",
    "new york",
    "golden lion",
    "taiwan",
    "ang lee",
    "x",
    "berlin",
];

fn decorate(rng: &mut ChaCha8Rng, s: &str) -> String {
    match rng.random_range(0..4) {
        0 => s.to_string(),
        1 => s.to_uppercase(),
        2 => format!("  {}. ", s.replace(' ', "   ")),
        _ => format!("\"{s}\""),
    }
}

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    for i in 0..1000 {
        let n_gold = rng.random_range(1..=4);
        let gold_base: Vec<&str> = VOCAB.choose_multiple(&mut rng, n_gold).copied().collect();
        let pred_base: Vec<&str> = (0..rng.random_range(0..=5))
            .map(|_| *VOCAB.choose(&mut rng).unwrap())
            .collect();
        let gold: Vec<String> = gold_base.iter().map(|s| decorate(&mut rng, s)).collect();
        let pred: Vec<String> = pred_base.iter().map(|s| decorate(&mut rng, s)).collect();

        let g: BTreeSet<&str> = gold_base.iter().copied().collect();
        let p: BTreeSet<&str> = pred_base.iter().copied().collect();
        let inter = g.intersection(&p).count();
        let want_hit = inter > 0;
        let want_h1 = pred_base.first().is_some_and(|x| g.contains(x));
        let want_f1 = if inter == 0 {
            0.0
        } else {
            (2 * inter) as f64 / (g.len() + p.len()) as f64
        };

        let got_hit = hit(&gold, &pred);
        let got_h1 = hits_at_1(&gold, &pred);
        let got_f1: f64 = f1(&gold, &pred);
        ensure!(got_hit == want_hit, "pair {i}: hit {got_hit} for {gold:?} / {pred:?}");
        ensure!(got_h1 == want_h1, "pair {i}: hits@1 {got_h1} for {gold:?} / {pred:?}");
        ensure!(
            got_f1 == want_f1,
            "pair {i}: f1 {got_f1} vs {want_f1} for {gold:?} / {pred:?}"
        );
        ensure!(!got_h1 || got_hit, "pair {i}: hits@1 without hit");
        let f1_32: f32 = f1(&gold, &pred);
        ensure!((f64::from(f1_32) - want_f1).abs() < 1e-6, "pair {i}: f32 f1 {f1_32}");
    }
    Ok("1000 pairs".into())
}

// ---------------------------------------------------------------------------
// verdict parsing

const SIBLING_VERDICT: &str = r#"{"answer": ["Jaxon Bieber"], "sufficient": "Yes", "reason": "Based on the reasoning path, the answer is Jaxon Bieber, which is the sibling of Justin Bieber."}"#;
const FILM_VERDICT: &str = r#"{"answer": ["Children of Men", "Green Street", "Cold Mountain"], "sufficient": "No", "reason": "The reasoning path connects Charlie Hunnam to films he has acted in, but we need to find which movie is about human extinction."}"#;

fn mutate(rng: &mut ChaCha8Rng, base: &str) -> String {
    let mut chars: Vec<char> = base.chars().collect();
    for _ in 0..rng.random_range(1..=4) {
        if chars.is_empty() {
            break;
        }
        let i = rng.random_range(0..chars.len());
        match rng.random_range(0..5) {
            0 => {
                chars.remove(i);
            }
            1 => chars.insert(
                i,
                *['{', '}', '"', '[', ']', ',', ':', '\\', 'é', '\u{0}']
                    .choose(rng)
                    .unwrap(),
            ),
            2 => chars.truncate(i),
            3 => {
                let j = rng.random_range(i..chars.len());
                chars.drain(i..j);
            }
            _ => {
                let j = rng.random_range(0..chars.len());
                chars.swap(i, j);
            }
        }
    }
    chars.into_iter().collect()
}

fn random_garbage(rng: &mut ChaCha8Rng) -> String {
    let alphabet: Vec<char> = "{}[]\":, abcYesNo\\\n\t0123456789answersufficientreason"
        .chars()
        .collect();
    (0..rng.random_range(0..80))
        .map(|_| *alphabet.choose(rng).unwrap())
        .collect()
}

fn verdict_parser() -> Check {
    for exemplar in [SIBLING_VERDICT, FILM_VERDICT] {
        let v = parse_verdict(exemplar).map_err(|e| format!("exemplar rejected: {e}"))?;
        ensure!(v.to_wire() == exemplar, "round trip changed {exemplar}");
    }
    let doubled = format!("{{{SIBLING_VERDICT}}}");
    ensure!(parse_verdict(&doubled).is_ok(), "doubled braces rejected");

    let mut rng = ChaCha8Rng::seed_from_u64(0x0dd);
    let mut errors = 0;
    for i in 0..10_000 {
        let input = match i % 3 {
            0 => mutate(&mut rng, SIBLING_VERDICT),
            1 => mutate(&mut rng, FILM_VERDICT),
            _ => random_garbage(&mut rng),
        };
        let result = catch_unwind(AssertUnwindSafe(|| parse_verdict(&input)))
            .map_err(|_| format!("panic on input {input:?}"))?;
        match result {
            Ok(v) => ensure!(
                !v.sufficient || !v.answers.is_empty(),
                "sufficient verdict without answers from {input:?}"
            ),
            Err(e) => {
                ensure!(!e.to_string().is_empty(), "empty error message");
                errors += 1;
            }
        }
    }

    let oracle = ScriptedOracle::new(Vec::new(), "definitely { not json");
    let mut session = Session::new(&oracle, "m");
    let constraints = ConstraintSet::default();
    let input = VerificationInput {
        question: "q",
        topic_entities: &[],
        constraints: &constraints,
        relation_path: "A -> r -> Unknown Entity",
        groundings: &[],
    };
    let v = verify_path(&input, &mut session, true).map_err(|e| e.to_string())?;
    ensure!(
        v.verdict == VerificationVerdict::unparseable(),
        "malformed reply gave {:?}",
        v.verdict
    );
    ensure!(
        !v.verdict.is_verified() && v.parse_error.is_some(),
        "did not fail closed"
    );
    Ok(format!(
        "2 exemplars; 10000 fuzzed inputs, {errors} typed errors, no panics"
    ))
}

// ---------------------------------------------------------------------------
// reproducibility

fn jsonl_bytes<T: serde::Serialize>(dir: &Path, name: &str, items: &[T]) -> Result<Vec<u8>, String> {
    let p = dir.join(name);
    write_jsonl(&p, items).map_err(|e| e.to_string())?;
    std::fs::read(&p).map_err(|e| e.to_string())
}

fn dataset_files(dir: &Path, seed: u64) -> Result<Vec<Vec<u8>>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rg = random_graph(&mut rng, 40, 6, 3);
    let questions: Vec<Question> = (0..60)
        .map(|i| {
            let (nt, na) = (rng.random_range(1..=3), rng.random_range(1..=2));
            Question {
                id: format!("q{i}"),
                question: format!("question number {i}"),
                topic_entities: rg.entities.choose_multiple(&mut rng, nt).cloned().collect(),
                answers: rg.entities.choose_multiple(&mut rng, na).cloned().collect(),
            }
        })
        .collect();
    let records = extract_weak_supervision(&rg.graph, &questions, 3);
    if !records.iter().any(|r| r.flag.is_none()) || !records.iter().any(|r| r.flag == Some(RecordFlag::NoPath)) {
        return Err("corpus lacks usable or flagged records".into());
    }
    let ws = jsonl_bytes(dir, "ws.jsonl", &records)?;
    emit_sft_dataset(&records, dir.join("sft.jsonl")).map_err(|e| e.to_string())?;
    build_preference_dataset(&records, 11, KtoConfig::default(), dir.join("prefs.jsonl")).map_err(|e| e.to_string())?;
    let read = |n: &str| std::fs::read(dir.join(n)).map_err(|e| e.to_string());
    Ok(vec![ws, read("sft.jsonl")?, read("prefs.jsonl")?])
}

fn trace_file(dir: &Path, parallel: usize) -> Result<Vec<u8>, String> {
    let t = toy()?;
    let traces: Vec<ReasoningTrace> =
        answer_batch(&t.questions, &t.graph, &t.cfg, &t.generator, &t.oracle, parallel).map_err(|e| e.to_string())?;
    jsonl_bytes(dir, "traces.jsonl", &traces)
}

fn reproducibility() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let da = dataset_files(a.path(), 21)?;
    let db = dataset_files(b.path(), 21)?;
    for (name, (x, y)) in ["weak supervision", "sft", "preferences"]
        .iter()
        .zip(da.iter().zip(&db))
    {
        ensure!(x == y, "{name} files differ");
        ensure!(!x.is_empty(), "{name} file is empty");
    }
    let ta = trace_file(a.path(), 1)?;
    let tb = trace_file(b.path(), 4)?;
    ensure!(ta == tb, "trace files differ");
    let dc = dataset_files(a.path(), 21)?;
    ensure!(dc == da, "rerun in the same directory differs");
    Ok(format!(
        "3 dataset files and 1 trace file ({} bytes) identical",
        ta.len()
    ))
}

// ---------------------------------------------------------------------------
// published interaction costs

fn published_costs() -> Check {
    let want = [
        ("CWQ", 2.9, 2928.6, 186.4, 3115.0),
        ("WebQSP", 2.5, 2552.8, 146.7, 2699.5),
    ];
    for (r, (name, calls, input, output, total)) in PUBLISHED_INTERACTION_COSTS.iter().zip(want) {
        ensure!(
            (r.dataset, r.calls, r.input_tokens, r.output_tokens, r.total_tokens)
                == (name, calls, input, output, total),
            "reference row {r:?}"
        );
        ensure!(
            (r.input_tokens + r.output_tokens - r.total_tokens).abs() < 1e-9,
            "{name} totals do not add up"
        );
    }
    let report = aggregate::<f64>(&[]);
    ensure!(
        report.reference == PUBLISHED_INTERACTION_COSTS.to_vec(),
        "metrics report omits references"
    );
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md"))
        .map_err(|e| format!("README: {e}"))?;
    for v in ["2.9", "2.5", "3115.0", "2699.5"] {
        ensure!(readme.contains(v), "README does not list {v}");
    }
    Ok("CWQ 2.9 calls / 3115.0 tokens, WebQSP 2.5 calls / 2699.5 tokens".into())
}

fn main() {
    let criteria: [Criterion; 11] = [
        (
            "shortest relation paths match brute-force enumeration",
            shortest_path_oracle,
        ),
        ("instantiation is sound and complete", instantiation_oracle),
        ("perturbations and 3:1 negative ratio", perturbation_suite),
        ("KTO loss identities", kto_identities),
        ("SFT objective is a plain sum", sft_sum),
        ("toy graph backtracks once and answers correctly", toy_end_to_end),
        (
            "reasoning loop terminates within the call bound",
            termination_and_call_bound,
        ),
        ("metrics match set oracles", metrics_oracle),
        ("verdict parser round-trips and never panics", verdict_parser),
        ("outputs are byte-identical across runs", reproducibility),
        ("published interaction costs are recorded", published_costs),
    ];
    let quiet_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS  {name} [{detail}] ({ms} ms)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({ms} ms)");
            }
        }
    }
    std::panic::set_hook(quiet_hook);
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
