use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use pathwise_core::constraints::{constraint_statistics, extract_constraints, ConstraintSet};
use pathwise_core::dataset::{read_jsonl, write_jsonl};
use pathwise_core::eval::{aggregate, qa_records, sample_questions, write_record_csv};
use pathwise_core::llm::{ChatBackend, ScriptedOracle, Session, UsageRecord, TEMPLATE_VERSION};
use pathwise_core::loss::{kto_loss, sft_loss, KtoConfig, ReferencePoint};
use pathwise_core::orchestrator::{answer_batch, ReasoningTrace};
use pathwise_core::paths::{emit_sft_dataset, extract_weak_supervision, RecordFlag};
use pathwise_core::preference::build_preference_dataset;
use pathwise_core::{load_graph, load_questions, KnowledgeGraph, LoadOptions, Question, ScoredExample64};
use pathwise_core::{MetricsReport64, WeakSupervisionRecord};
use serde::{Deserialize, Serialize};

use crate::config::{config_error, RunConfig};
use crate::{Cli, Command};

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: &'a RunConfig,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator: Option<String>,
    template_version: &'static str,
    started: String,
    finished: String,
    outputs: Vec<String>,
}

/// Identities and output files collected while a subcommand runs.
#[derive(Default)]
struct Run {
    backend: Option<String>,
    generator: Option<String>,
    outputs: Vec<String>,
}

impl Run {
    fn write_json<T: Serialize>(&mut self, dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
        let path = dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_jsonl<T: Serialize>(&mut self, dir: &Path, name: &str, items: &[T]) -> anyhow::Result<()> {
        write_jsonl(dir.join(name), items)?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn resolved_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(cli.common.config.as_deref())?;
    let c = &cli.common;
    if let Some(p) = &c.output_dir {
        cfg.output_dir = p.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.graph {
        cfg.graph = Some(p.clone());
    }
    if let Some(p) = &c.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(k) = c.k {
        cfg.k = k;
    }
    cfg.apply_env();
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = resolved_config(cli)?;
    let started = now();
    let mut run = Run::default();
    match &cli.command {
        Command::Extract => extract(&cfg, &mut run)?,
        Command::BuildPrefs { records } => build_prefs(&cfg, records.as_deref(), &mut run)?,
        Command::LossCheck {
            input,
            z0,
            beta,
            lambda_p,
            lambda_n,
        } => {
            let d = cfg.kto;
            cfg.kto = KtoConfig::new(
                beta.unwrap_or(d.beta),
                lambda_p.unwrap_or(d.lambda_p),
                lambda_n.unwrap_or(d.lambda_n),
            )
            .map_err(|e| config_error(e.to_string()))?;
            loss_check(&cfg, input, *z0, &mut run)?
        }
        Command::Answer { mock, parallel, sample } => answer(&cfg, mock.as_deref(), *parallel, *sample, &mut run)?,
        Command::Eval { traces, gold, csv } => evaluate(&cfg, traces.as_deref(), gold.as_deref(), *csv, &mut run)?,
        Command::Stats {
            sample,
            graph_summary,
            mock,
        } => {
            if *graph_summary {
                graph_stats(&cfg, &mut run)?
            } else {
                constraint_stats(&cfg, mock.as_deref(), *sample, &mut run)?
            }
        }
    }
    let sub = cli.command.name();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand: sub,
        config: &cfg,
        seed: cfg.seed,
        backend: run.backend.take(),
        generator: run.generator.take(),
        template_version: TEMPLATE_VERSION,
        started,
        finished: now(),
        outputs: run.outputs.clone(),
    };
    Run::default().write_json(&cfg.output_dir, &format!("manifest-{sub}.json"), &manifest)
}

fn create_output_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    Ok(&cfg.output_dir)
}

fn graph_and_questions(cfg: &RunConfig) -> anyhow::Result<(KnowledgeGraph, Vec<Question>)> {
    let graph_path = cfg.require_graph()?;
    let dataset_path = cfg.require_dataset()?;
    let g = load_graph(
        graph_path,
        LoadOptions {
            inverse_edges: cfg.inverse_edges,
        },
    )?;
    let qs = load_questions(dataset_path)?;
    Ok((g, qs))
}

fn sampled(qs: Vec<Question>, n: Option<usize>, seed: u64) -> anyhow::Result<Vec<Question>> {
    match n {
        None => Ok(qs),
        Some(n) => sample_questions(&qs, n, seed).map_err(|e| config_error(e.to_string())),
    }
}

fn existing_file(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(config_error(format!("{what} file {} does not exist", p.display())))
    }
}

fn backend_for(cfg: &RunConfig, mock: Option<&Path>) -> anyhow::Result<Box<dyn ChatBackend>> {
    match mock {
        Some(p) => {
            existing_file(p, "mock rules")?;
            Ok(Box::new(
                ScriptedOracle::from_jsonl(p).map_err(|e| config_error(e.to_string()))?,
            ))
        }
        None => cfg.build_backend(),
    }
}

#[derive(Debug, Serialize)]
struct ExtractSummary {
    k: usize,
    questions: usize,
    records: usize,
    usable: usize,
    unlinked: usize,
    no_path: usize,
    gold_paths: usize,
    sft_examples: usize,
}

fn extract(cfg: &RunConfig, run: &mut Run) -> anyhow::Result<()> {
    let (g, qs) = graph_and_questions(cfg)?;
    let records = extract_weak_supervision(&g, &qs, cfg.k);
    let dir = create_output_dir(cfg)?;
    run.write_jsonl(dir, "weak_supervision.jsonl", &records)?;
    let sft_examples = emit_sft_dataset(&records, dir.join("sft.jsonl"))?;
    run.outputs.push("sft.jsonl".into());
    let flagged = |f: RecordFlag| records.iter().filter(|r| r.flag == Some(f)).count();
    let summary = ExtractSummary {
        k: cfg.k,
        questions: qs.len(),
        records: records.len(),
        usable: records.iter().filter(|r| r.is_usable()).count(),
        unlinked: flagged(RecordFlag::Unlinked),
        no_path: flagged(RecordFlag::NoPath),
        gold_paths: records.iter().map(|r| r.gold_paths.len()).sum(),
        sft_examples,
    };
    tracing::info!(
        records = summary.records,
        usable = summary.usable,
        "mined weak supervision"
    );
    run.write_json(dir, "extract-summary.json", &summary)
}

fn build_prefs(cfg: &RunConfig, records: Option<&Path>, run: &mut Run) -> anyhow::Result<()> {
    let records: Vec<WeakSupervisionRecord> = match records {
        Some(p) => {
            existing_file(p, "records")?;
            read_jsonl(p)?
        }
        None => {
            let (g, qs) = graph_and_questions(cfg)?;
            extract_weak_supervision(&g, &qs, cfg.k)
        }
    };
    let dir = create_output_dir(cfg)?;
    let summary = build_preference_dataset(&records, cfg.seed, cfg.kto, dir.join("preferences.jsonl"))?;
    run.outputs.push("preferences.jsonl".into());
    run.write_json(dir, "preference-summary.json", &summary)
}

/// One line of the `loss-check` input.
#[derive(Debug, Deserialize)]
struct ScoredLine {
    #[serde(flatten)]
    example: ScoredExample64,
    #[serde(default)]
    token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct LossReport {
    examples: usize,
    kto: KtoConfig<f64>,
    z0: f64,
    z0_source: &'static str,
    kto_loss: f64,
    per_example: Vec<f64>,
    /// Per-line SFT log-likelihood; `null` where no token log-probs were given.
    sft_per_example: Vec<Option<f64>>,
    sft_total: f64,
}

fn loss_check(cfg: &RunConfig, input: &Path, z0: Option<f64>, run: &mut Run) -> anyhow::Result<()> {
    existing_file(input, "scored input")?;
    if z0.is_some_and(|z| !z.is_finite()) {
        return Err(config_error("--z0 must be finite"));
    }
    let lines: Vec<ScoredLine> = read_jsonl(input)?;
    let batch: Vec<ScoredExample64> = lines.iter().map(|l| l.example).collect();
    let reference = z0.map_or(ReferencePoint::Estimate, ReferencePoint::Fixed);
    let out = kto_loss(&batch, &cfg.kto, reference).context("computing KTO loss")?;
    let sft_per_example: Vec<Option<f64>> = lines
        .iter()
        .map(|l| l.token_logprobs.as_deref().map(sft_loss))
        .collect();
    let report = LossReport {
        examples: batch.len(),
        kto: cfg.kto,
        z0: out.z0,
        z0_source: if z0.is_some() { "fixed" } else { "estimated" },
        kto_loss: out.loss,
        per_example: out.per_example,
        sft_total: sft_per_example.iter().flatten().sum(),
        sft_per_example,
    };
    let dir = create_output_dir(cfg)?;
    run.write_json(dir, "loss-report.json", &report)
}

fn answer(
    cfg: &RunConfig,
    mock: Option<&Path>,
    parallel: usize,
    sample: Option<usize>,
    run: &mut Run,
) -> anyhow::Result<()> {
    if parallel == 0 {
        return Err(config_error("--parallel must be at least 1"));
    }
    let backend = backend_for(cfg, mock)?;
    let generator = cfg.build_generator()?;
    run.backend = Some(backend.identity());
    run.generator = Some(generator.identity());
    let (g, qs) = graph_and_questions(cfg)?;
    let qs = sampled(qs, sample, cfg.seed)?;
    let rcfg = cfg.reasoner_config();
    let traces = answer_batch(&qs, &g, &rcfg, generator.as_ref(), backend.as_ref(), parallel)?;
    let failed = traces.iter().filter(|t| t.failed()).count();
    if failed > 0 {
        tracing::warn!(failed, "some questions failed; see trace errors");
    }
    let dir = create_output_dir(cfg)?;
    run.write_jsonl(dir, "traces.jsonl", &traces)
}

fn evaluate(
    cfg: &RunConfig,
    traces: Option<&Path>,
    gold: Option<&Path>,
    csv: bool,
    run: &mut Run,
) -> anyhow::Result<()> {
    let default_traces = cfg.output_dir.join("traces.jsonl");
    let traces_path = traces.unwrap_or(&default_traces);
    existing_file(traces_path, "traces")?;
    let gold_path: PathBuf = match gold {
        Some(p) => {
            existing_file(p, "gold")?;
            p.to_path_buf()
        }
        None => cfg.require_dataset()?.to_path_buf(),
    };
    let traces: Vec<ReasoningTrace> = read_jsonl(traces_path)?;
    let gold = load_questions(&gold_path)?;
    let records = qa_records(&traces, &gold)?;
    let report: MetricsReport64 = aggregate(&records);
    let dir = create_output_dir(cfg)?;
    run.write_json(dir, "metrics.json", &report)?;
    if csv {
        write_record_csv::<f64>(dir.join("records.csv"), &records)?;
        run.outputs.push("records.csv".into());
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn graph_stats(cfg: &RunConfig, run: &mut Run) -> anyhow::Result<()> {
    let g = load_graph(
        cfg.require_graph()?,
        LoadOptions {
            inverse_edges: cfg.inverse_edges,
        },
    )?;
    let stats = g.stats();
    let dir = create_output_dir(cfg)?;
    run.write_json(dir, "graph-stats.json", &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ConstraintReport {
    #[serde(flatten)]
    stats: pathwise_core::constraints::ConstraintStats,
    unparseable: usize,
    usage: UsageRecord,
}

fn constraint_stats(cfg: &RunConfig, mock: Option<&Path>, sample: Option<usize>, run: &mut Run) -> anyhow::Result<()> {
    let backend = backend_for(cfg, mock)?;
    run.backend = Some(backend.identity());
    let qs = sampled(load_questions(cfg.require_dataset()?)?, sample, cfg.seed)?;
    let rcfg = cfg.reasoner_config();
    let mut session = Session::new(backend.as_ref(), rcfg.model.clone());
    let mut sets: Vec<ConstraintSet> = Vec::with_capacity(qs.len());
    let mut unparseable = 0;
    for q in &qs {
        let ex = extract_constraints(&q.question, &mut session, true)
            .with_context(|| format!("extracting constraints for {}", q.id))?;
        if ex.warning.is_some() {
            unparseable += 1;
        }
        sets.push(ex.constraints);
    }
    let report = ConstraintReport {
        stats: constraint_statistics(&sets),
        unparseable,
        usage: session.usage(),
    };
    let dir = create_output_dir(cfg)?;
    run.write_json(dir, "constraint-stats.json", &report)
}
