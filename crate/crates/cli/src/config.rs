use std::fmt;
use std::path::{Path, PathBuf};

use pathwise_core::llm::{ChatBackend, HttpBackend, HttpConfig, ScriptedOracle};
use pathwise_core::loss::KtoConfig;
use pathwise_core::orchestrator::{EnumerationGenerator, LlmPathGenerator, PathGenerator, ReasonerConfig};
use serde::{Deserialize, Serialize};

/// Overrides `base_url` of every HTTP section when set.
pub const BASE_URL_ENV: &str = "PATHWISE_BASE_URL";

/// Bad flags, bad config, or unresolvable paths. Maps to exit status 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Http(HttpConfig),
    Scripted {
        rules: PathBuf,
        #[serde(default)]
        default_response: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorConfig {
    #[default]
    Enumeration,
    Http(HttpConfig),
    Scripted {
        rules: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerSection {
    pub instantiation_cap: usize,
    pub candidate_limit: usize,
    pub selection_window: usize,
}

impl Default for ReasonerSection {
    fn default() -> Self {
        let d = ReasonerConfig::default();
        ReasonerSection {
            instantiation_cap: d.instantiation_cap,
            candidate_limit: d.candidate_limit,
            selection_window: d.selection_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Materialize `.inv` edges at load time.
    #[serde(default)]
    pub inverse_edges: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reasoner: ReasonerSection,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub kto: KtoConfig<f64>,
}

fn default_k() -> usize {
    3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.graph, &mut cfg.dataset].into_iter().flatten() {
            resolve(base, p);
        }
        resolve(base, &mut cfg.output_dir);
        if let Some(BackendConfig::Scripted { rules, .. }) = &mut cfg.backend {
            resolve(base, rules);
        }
        if let GeneratorConfig::Scripted { rules } = &mut cfg.generator {
            resolve(base, rules);
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn apply_env(&mut self) {
        let Ok(url) = std::env::var(BASE_URL_ENV) else { return };
        if let Some(BackendConfig::Http(h)) = &mut self.backend {
            h.base_url = url.clone();
        }
        if let GeneratorConfig::Http(h) = &mut self.generator {
            h.base_url = url;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            return Err(config_error("k must be at least 1"));
        }
        self.reasoner_config().validate().map_err(config_error)?;
        self.kto.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(())
    }

    pub fn reasoner_config(&self) -> ReasonerConfig {
        let model = match &self.backend {
            Some(BackendConfig::Http(h)) => h.model.clone(),
            _ => ReasonerConfig::default().model,
        };
        ReasonerConfig {
            max_depth: self.k,
            instantiation_cap: self.reasoner.instantiation_cap,
            candidate_limit: self.reasoner.candidate_limit,
            selection_window: self.reasoner.selection_window,
            model,
            seed: self.seed,
        }
    }

    pub fn require_graph(&self) -> anyhow::Result<&Path> {
        existing(self.graph.as_deref(), "graph")
    }

    pub fn require_dataset(&self) -> anyhow::Result<&Path> {
        existing(self.dataset.as_deref(), "dataset")
    }

    pub fn build_backend(&self) -> anyhow::Result<Box<dyn ChatBackend>> {
        match &self.backend {
            None => Err(config_error("no [backend] section and no --mock rules given")),
            Some(b) => backend_from(b),
        }
    }

    pub fn build_generator(&self) -> anyhow::Result<Box<dyn PathGenerator>> {
        Ok(match &self.generator {
            GeneratorConfig::Enumeration => Box::new(EnumerationGenerator),
            GeneratorConfig::Scripted { rules } => {
                let oracle = load_rules(rules)?;
                Box::new(LlmPathGenerator::new(oracle, "scripted"))
            }
            GeneratorConfig::Http(h) => {
                let model = h.model.clone();
                let backend = HttpBackend::from_env(h.clone()).map_err(|e| config_error(e.to_string()))?;
                Box::new(LlmPathGenerator::new(backend, model))
            }
        })
    }
}

fn existing<'a>(p: Option<&'a Path>, what: &str) -> anyhow::Result<&'a Path> {
    let p = p.ok_or_else(|| config_error(format!("no {what} path configured")))?;
    if !p.is_file() {
        return Err(config_error(format!("{what} file {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_rules(path: &Path) -> anyhow::Result<ScriptedOracle> {
    if !path.is_file() {
        return Err(config_error(format!("rules file {} does not exist", path.display())));
    }
    ScriptedOracle::from_jsonl(path).map_err(|e| config_error(e.to_string()))
}

fn backend_from(b: &BackendConfig) -> anyhow::Result<Box<dyn ChatBackend>> {
    Ok(match b {
        BackendConfig::Scripted {
            rules,
            default_response,
        } => Box::new(load_rules(rules)?.with_default(default_response.clone())),
        BackendConfig::Http(h) => Box::new(HttpBackend::from_env(h.clone()).map_err(|e| config_error(e.to_string()))?),
    })
}
