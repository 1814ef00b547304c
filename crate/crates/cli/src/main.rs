//! `hopgraph`: index a corpus, answer questions, run benchmarks, inspect the graph.
//!
//! Exit codes: 0 success, 2 usage or argument error, 3 missing artifact,
//! 4 runtime pipeline error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Backend, Config, EmbedderKind, Layer};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 4,
            message: message.into(),
        }
    }
}

#[derive(Parser)]
#[command(name = "hopgraph", version, about = "Multi-hop question answering over a self-extending knowledge graph")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "HOPGRAPH_CONFIG")]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flag overrides. The API key is deliberately not among them.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    backend: Option<Backend>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    embedder: Option<EmbedderKind>,
    #[arg(long, global = true)]
    embedding_fixture: Option<PathBuf>,
    #[arg(long, global = true)]
    stub_script: Option<PathBuf>,
    #[arg(long, global = true)]
    templates_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    snapshot_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    k_triples: Option<usize>,
    #[arg(long, global = true)]
    k_docs: Option<usize>,
    #[arg(long, global = true)]
    max_subquestions: Option<usize>,
    #[arg(long, global = true)]
    llm_budget: Option<u32>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Answer each question as a single step.
    #[arg(long, global = true)]
    no_decompose: bool,
    /// Substitute earlier answers literally instead of asking the model to rewrite.
    #[arg(long, global = true)]
    no_rewrite: bool,
    /// Answer fallbacks from documents without writing triples back.
    #[arg(long, global = true)]
    no_update: bool,
}

impl Overrides {
    fn into_layer(self) -> Layer {
        Layer {
            backend: self.backend,
            endpoint: self.endpoint,
            model: self.model,
            embedder: self.embedder,
            embedding_fixture: self.embedding_fixture,
            stub_script: self.stub_script,
            templates_dir: self.templates_dir,
            snapshot_dir: self.snapshot_dir,
            run_dir: self.run_dir,
            k_triples: self.k_triples,
            k_docs: self.k_docs,
            max_subquestions: self.max_subquestions,
            llm_budget: self.llm_budget,
            parallelism: self.parallelism,
            decompose: self.no_decompose.then_some(false),
            rewrite: self.no_rewrite.then_some(false),
            update_graph: self.no_update.then_some(false),
            ..Layer::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract triples from a corpus and write the graph and index snapshot.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        /// Overwrite an existing snapshot.
        #[arg(long)]
        force: bool,
    },
    /// Answer one question and print the final answer.
    Ask {
        question: String,
        /// Question id, used in the provenance of written-back triples.
        #[arg(long, default_value = "ask")]
        id: String,
        /// Write the question trace into the run directory.
        #[arg(long)]
        trace: bool,
        /// Print the graph memory the answer was generated from.
        #[arg(long)]
        show_memory: bool,
        /// Persist triples written back while answering.
        #[arg(long)]
        save_updates: bool,
    },
    /// Run a dataset and report EM/F1.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "generic")]
        format: FormatArg,
        /// Persist triples written back during the run.
        #[arg(long)]
        save_updates: bool,
    },
    /// Inspect the graph snapshot.
    Graph {
        #[command(subcommand)]
        action: GraphAction,
    },
}

#[derive(Subcommand)]
enum GraphAction {
    /// Print triple, entity and dynamic-triple counts.
    Stats,
    /// Write the graph as line-JSON or a tab-separated edge list.
    Export {
        #[arg(long, value_enum, default_value = "json")]
        format: ExportFormat,
        /// Output file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Generic,
    Hotpotqa,
    Musique,
    #[value(name = "2wiki")]
    TwoWiki,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExportFormat {
    Json,
    Edgelist,
}

fn load_config(path: Option<&PathBuf>, overrides: Overrides) -> Result<Config, CliError> {
    let file = match path {
        Some(p) => Layer::from_file(p)?,
        None => Layer::default(),
    };
    let env = Layer::from_env(std::env::vars())?;
    Config::resolve(file, env, overrides.into_layer())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_ref(), cli.overrides)?;
    match cli.command {
        Command::Index { corpus, force } => commands::index(&cfg, &corpus, force),
        Command::Ask {
            question,
            id,
            trace,
            show_memory,
            save_updates,
        } => commands::ask(&cfg, &question, &id, trace, show_memory, save_updates),
        Command::Eval {
            dataset,
            format,
            save_updates,
        } => {
            use hopgraph_core::eval::DatasetFormat;
            let format = match format {
                FormatArg::Generic => DatasetFormat::Generic,
                FormatArg::Hotpotqa => DatasetFormat::Hotpotqa,
                FormatArg::Musique => DatasetFormat::Musique,
                FormatArg::TwoWiki => DatasetFormat::TwoWiki,
            };
            commands::eval(&cfg, &dataset, format, save_updates)
        }
        Command::Graph { action } => match action {
            GraphAction::Stats => commands::graph_stats(&cfg),
            GraphAction::Export { format, output } => commands::graph_export(&cfg, format, output.as_deref()),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
