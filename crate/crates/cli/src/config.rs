//! Configuration layering: flags > `HOPGRAPH_*` environment > config file > defaults.
//!
//! Relative paths in a config file are taken relative to that file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::ValueEnum;
use hopgraph_core::embedders::{FixtureEmbedder, HashingEmbedder, RemoteEmbedder};
use hopgraph_core::llm::remote::RemoteBackend;
use hopgraph_core::llm::stub::{StubBackend, StubScript};
use hopgraph_core::llm::{ChatBackend, Gateway, TemplateRegistry};
use hopgraph_core::solver::SolverConfig;
use hopgraph_core::vector_index::Embedder;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_PREFIX: &str = "HOPGRAPH_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Remote,
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hashing,
    Fixture,
    Remote,
}

#[derive(Debug, Clone, Serialize)]
pub struct Config {
    pub backend: Backend,
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub embedder: EmbedderKind,
    pub embedding_model: String,
    pub embedding_endpoint: Option<String>,
    pub embedding_dimension: usize,
    pub embedding_fixture: Option<PathBuf>,
    pub k_triples: usize,
    pub k_docs: usize,
    pub max_subquestions: usize,
    pub llm_budget: u32,
    pub parallelism: usize,
    pub char_budget: usize,
    pub decompose: bool,
    pub rewrite: bool,
    pub update_graph: bool,
    pub timeout_secs: u64,
    pub templates_dir: Option<PathBuf>,
    pub snapshot_dir: PathBuf,
    pub run_dir: PathBuf,
    pub stub_script: Option<PathBuf>,
    pub wire_log: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            backend: Backend::Remote,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key: None,
            embedder: EmbedderKind::Hashing,
            embedding_model: "all-MiniLM-L6-v2".into(),
            embedding_endpoint: None,
            embedding_dimension: 384,
            embedding_fixture: None,
            k_triples: 5,
            k_docs: 5,
            max_subquestions: 6,
            llm_budget: 25,
            parallelism: 4,
            char_budget: 8000,
            decompose: true,
            rewrite: true,
            update_graph: true,
            timeout_secs: 60,
            templates_dir: None,
            snapshot_dir: PathBuf::from("hopgraph-data/snapshot"),
            run_dir: PathBuf::from("hopgraph-data/runs"),
            stub_script: None,
            wire_log: None,
        }
    }
}

/// One source of settings; unset fields fall through to the next source.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub backend: Option<Backend>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub embedder: Option<EmbedderKind>,
    pub embedding_model: Option<String>,
    pub embedding_endpoint: Option<String>,
    pub embedding_dimension: Option<usize>,
    pub embedding_fixture: Option<PathBuf>,
    pub k_triples: Option<usize>,
    pub k_docs: Option<usize>,
    pub max_subquestions: Option<usize>,
    pub llm_budget: Option<u32>,
    pub parallelism: Option<usize>,
    pub char_budget: Option<usize>,
    pub decompose: Option<bool>,
    pub rewrite: Option<bool>,
    pub update_graph: Option<bool>,
    pub timeout_secs: Option<u64>,
    pub templates_dir: Option<PathBuf>,
    pub snapshot_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub stub_script: Option<PathBuf>,
    pub wire_log: Option<PathBuf>,
}

const NUMERIC_KEYS: &[&str] = &[
    "embedding_dimension",
    "k_triples",
    "k_docs",
    "max_subquestions",
    "llm_budget",
    "parallelism",
    "char_budget",
    "timeout_secs",
];
const BOOL_KEYS: &[&str] = &["decompose", "rewrite", "update_graph"];

impl Layer {
    pub fn from_file(path: &Path) -> Result<Layer, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut layer: Layer =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut layer.embedding_fixture,
            &mut layer.templates_dir,
            &mut layer.snapshot_dir,
            &mut layer.run_dir,
            &mut layer.stub_script,
            &mut layer.wire_log,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(layer)
    }

    /// Read `HOPGRAPH_<FIELD>` variables from `vars`.
    pub fn from_env(vars: impl IntoIterator<Item = (String, String)>) -> Result<Layer, CliError> {
        let mut table = toml::Table::new();
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if key == "config" {
                continue;
            }
            let parsed = if NUMERIC_KEYS.contains(&key.as_str()) {
                value
                    .trim()
                    .parse::<i64>()
                    .map(toml::Value::Integer)
                    .map_err(|_| CliError::usage(format!("{name} must be an integer, got {value:?}")))?
            } else if BOOL_KEYS.contains(&key.as_str()) {
                value
                    .trim()
                    .parse::<bool>()
                    .map(toml::Value::Boolean)
                    .map_err(|_| CliError::usage(format!("{name} must be true or false, got {value:?}")))?
            } else {
                toml::Value::String(value)
            };
            table.insert(key, parsed);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::usage(format!("environment: {e}")))
    }
}

impl Config {
    pub fn resolve(file: Layer, env: Layer, flags: Layer) -> Result<Config, CliError> {
        let d = Config::default();
        macro_rules! pick {
            ($f:ident) => {
                flags.$f.or(env.$f).or(file.$f).unwrap_or(d.$f)
            };
        }
        macro_rules! pick_opt {
            ($f:ident) => {
                flags.$f.or(env.$f).or(file.$f).or(d.$f)
            };
        }
        let cfg = Config {
            backend: pick!(backend),
            endpoint: pick!(endpoint),
            model: pick!(model),
            // never a flag
            api_key: env.api_key.or(file.api_key),
            embedder: pick!(embedder),
            embedding_model: pick!(embedding_model),
            embedding_endpoint: pick_opt!(embedding_endpoint),
            embedding_dimension: pick!(embedding_dimension),
            embedding_fixture: pick_opt!(embedding_fixture),
            k_triples: pick!(k_triples),
            k_docs: pick!(k_docs),
            max_subquestions: pick!(max_subquestions),
            llm_budget: pick!(llm_budget),
            parallelism: pick!(parallelism),
            char_budget: pick!(char_budget),
            decompose: pick!(decompose),
            rewrite: pick!(rewrite),
            update_graph: pick!(update_graph),
            timeout_secs: pick!(timeout_secs),
            templates_dir: pick_opt!(templates_dir),
            snapshot_dir: pick!(snapshot_dir),
            run_dir: pick!(run_dir),
            stub_script: pick_opt!(stub_script),
            wire_log: pick_opt!(wire_log),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("k_triples", self.k_triples),
            ("k_docs", self.k_docs),
            ("max_subquestions", self.max_subquestions),
            ("llm_budget", self.llm_budget as usize),
            ("parallelism", self.parallelism),
            ("char_budget", self.char_budget),
            ("embedding_dimension", self.embedding_dimension),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::usage(format!("{name} must be at least 1")));
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            k_triples: self.k_triples,
            k_docs: self.k_docs,
            max_subquestions: self.max_subquestions,
            llm_budget: self.llm_budget,
            char_budget: self.char_budget,
            decompose: self.decompose,
            rewrite: self.rewrite,
            update_graph: self.update_graph,
            record_timing: self.backend == Backend::Remote,
        }
    }

    /// Table row label for the active ablation switches.
    pub fn method_label(&self) -> String {
        let off: Vec<&str> = [
            (!self.decompose, "Decomposition"),
            (!self.rewrite, "Rewriting"),
            (!self.update_graph, "Update"),
        ]
        .into_iter()
        .filter_map(|(off, name)| off.then_some(name))
        .collect();
        if off.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", off.join(", "))
        }
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        let timeout = Duration::from_secs(self.timeout_secs);
        Ok(match self.embedder {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::new(self.embedding_dimension)),
            EmbedderKind::Fixture => {
                let path = self
                    .embedding_fixture
                    .as_ref()
                    .ok_or_else(|| CliError::usage("embedder = \"fixture\" needs embedding_fixture"))?;
                Box::new(FixtureEmbedder::from_file(path).map_err(|e| CliError::missing(e.to_string()))?)
            }
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(
                self.embedding_endpoint.as_deref().unwrap_or(&self.endpoint),
                &self.embedding_model,
                self.api_key.clone(),
                self.embedding_dimension,
                timeout,
            )),
        })
    }

    pub fn gateway(&self) -> Result<Gateway, CliError> {
        let templates = match &self.templates_dir {
            Some(dir) => TemplateRegistry::load_dir(dir).map_err(|e| CliError::missing(e.to_string()))?,
            None => TemplateRegistry::builtin(),
        };
        let backend: Box<dyn ChatBackend> = match self.backend {
            Backend::Stub => {
                let path = self
                    .stub_script
                    .as_ref()
                    .ok_or_else(|| CliError::usage("backend = \"stub\" needs stub_script"))?;
                Box::new(StubBackend::new(StubScript::from_file(path).map_err(CliError::missing)?))
            }
            Backend::Remote => {
                let mut b = RemoteBackend::new(
                    &self.endpoint,
                    &self.model,
                    self.api_key.clone(),
                    Duration::from_secs(self.timeout_secs),
                );
                if let Some(log) = &self.wire_log {
                    b = b
                        .with_wire_log(log)
                        .map_err(|e| CliError::runtime(format!("wire log {}: {e}", log.display())))?;
                }
                Box::new(b)
            }
        };
        Ok(Gateway::new(templates, backend, self.parallelism))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Layer {
        Layer::from_env(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string()))).unwrap()
    }

    #[test]
    fn precedence() {
        let file = Layer {
            k_triples: Some(3),
            k_docs: Some(2),
            model: Some("file-model".into()),
            ..Layer::default()
        };
        let env = env(&[("HOPGRAPH_K_TRIPLES", "4"), ("HOPGRAPH_MODEL", "env-model"), ("PATH", "/bin")]);
        let flags = Layer {
            k_triples: Some(7),
            ..Layer::default()
        };
        let cfg = Config::resolve(file, env, flags).unwrap();
        assert_eq!(cfg.k_triples, 7);
        assert_eq!(cfg.model, "env-model");
        assert_eq!(cfg.k_docs, 2);
        assert_eq!(cfg.llm_budget, 25);
    }

    #[test]
    fn bad_env_value_is_usage_error() {
        let err = Layer::from_env([("HOPGRAPH_K_DOCS".to_string(), "many".to_string())]).unwrap_err();
        assert_eq!(err.code, 2);
        let err = Layer::from_env([("HOPGRAPH_COLOUR".to_string(), "red".to_string())]).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn api_key_stays_out_of_snapshots() {
        let cfg = Config::resolve(Layer::default(), env(&[("HOPGRAPH_API_KEY", "sk-secret")]), Layer::default()).unwrap();
        assert_eq!(cfg.api_key.as_deref(), Some("sk-secret"));
        assert!(!serde_json::to_string(&cfg).unwrap().contains("sk-secret"));
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hopgraph.toml");
        std::fs::write(&path, "backend = \"stub\"\nstub_script = \"stub.json\"\n").unwrap();
        let layer = Layer::from_file(&path).unwrap();
        assert_eq!(layer.stub_script.unwrap(), dir.path().join("stub.json"));
    }

    #[test]
    fn zero_budget_rejected() {
        let flags = Layer {
            llm_budget: Some(0),
            ..Layer::default()
        };
        assert_eq!(Config::resolve(Layer::default(), Layer::default(), flags).unwrap_err().code, 2);
    }
}
