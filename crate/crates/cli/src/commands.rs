use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use hopgraph_core::eval::{self, DatasetFormat, EvalError, RunReport};
use hopgraph_core::indexer::{build_graph_index, ingest_corpus, CorpusError, IndexOptions};
use hopgraph_core::kg_store::{KnowledgeGraph, StoreError};
use hopgraph_core::solver::{solve, QuestionTrace};
use hopgraph_core::stores::{IndexManifest, SnapshotError, Stores, GRAPH_FILE};
use hopgraph_core::vector_index::Embedder;

use crate::config::Config;
use crate::{CliError, ExportFormat};

fn no_snapshot(dir: &Path) -> CliError {
    CliError::missing(format!(
        "no snapshot in {}; run `hopgraph index --corpus PATH` first",
        dir.display()
    ))
}

fn load_stores(cfg: &Config, embedder: &dyn Embedder) -> Result<Stores, CliError> {
    if !Stores::exists_in(&cfg.snapshot_dir) {
        return Err(no_snapshot(&cfg.snapshot_dir));
    }
    Stores::load_dir(&cfg.snapshot_dir, embedder).map_err(|e| match &e {
        SnapshotError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => CliError::missing(e.to_string()),
        _ => CliError::runtime(e.to_string()),
    })
}

fn file_name_for(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

fn write_trace(dir: &Path, trace: &QuestionTrace) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(file_name_for(&trace.question_id));
    std::fs::write(&path, trace.to_json()).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn save_updates(cfg: &Config, stores: &Stores, embedder: &dyn Embedder) -> Result<(), CliError> {
    stores
        .save_dir(&cfg.snapshot_dir, embedder, None)
        .map_err(|e| CliError::runtime(e.to_string()))
}

pub fn index(cfg: &Config, corpus_path: &Path, force: bool) -> Result<(), CliError> {
    if !corpus_path.is_file() {
        return Err(CliError::usage(format!(
            "corpus file not found: {}\nusage: hopgraph index --corpus PATH [--force]",
            corpus_path.display()
        )));
    }
    if Stores::exists_in(&cfg.snapshot_dir) && !force {
        return Err(CliError::missing(format!(
            "a snapshot already exists in {}; pass --force to overwrite it",
            cfg.snapshot_dir.display()
        )));
    }
    let corpus = ingest_corpus(corpus_path).map_err(|e| match e {
        CorpusError::Io(_) => CliError::missing(format!("{}: {e}", corpus_path.display())),
        _ => CliError::runtime(format!("{}: {e}", corpus_path.display())),
    })?;
    let embedder = cfg.embedder()?;
    let gateway = cfg.gateway()?;
    let opts = IndexOptions {
        char_budget: cfg.char_budget,
    };
    let build = build_graph_index(&corpus, &gateway, embedder.as_ref(), opts).map_err(|e| CliError::runtime(e.to_string()))?;
    let manifest = IndexManifest::new(corpus_path, &build, embedder.as_ref(), corpus.len())
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let report = build.report.clone();
    let stores = Stores::from_build(build, corpus);
    stores
        .save_dir(&cfg.snapshot_dir, embedder.as_ref(), Some(&manifest))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "indexed {} documents: {} triples ({} extracted, {} duplicates, {} dropped items)",
        report.documents_processed,
        report.triples_inserted,
        report.triples_extracted,
        report.duplicates_skipped,
        report.items_dropped
    );
    if !report.failures.is_empty() {
        println!("extraction failed for {}", report.failures.join(", "));
    }
    println!("snapshot written to {}", cfg.snapshot_dir.display());
    Ok(())
}

pub fn ask(cfg: &Config, question: &str, id: &str, trace: bool, show_memory: bool, persist: bool) -> Result<(), CliError> {
    let embedder = cfg.embedder()?;
    let stores = load_stores(cfg, embedder.as_ref())?;
    let gateway = cfg.gateway()?;
    let result = solve(id, question, &cfg.solver_config(), &stores, &gateway, embedder.as_ref());
    let (qt, failure) = match result {
        Ok(t) => (t, None),
        Err(e) => {
            let message = e.to_string();
            (e.into_partial(), Some(message))
        }
    };
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{}", qt.final_answer);
    if show_memory {
        for e in &qt.memory.entries {
            let t = &e.triple;
            let _ = writeln!(out, "step {}: {} | {} | {}", e.step, t.head, t.relation, t.tail);
        }
    }
    if trace {
        let path = write_trace(&cfg.run_dir.join("traces"), &qt)?;
        let _ = writeln!(out, "trace: {}", path.display());
    }
    for d in &qt.degradations {
        log::warn!("{}: {}", d.stage, d.detail);
    }
    if persist && qt.graph_triples_after > qt.graph_triples_before {
        save_updates(cfg, &stores, embedder.as_ref())?;
    }
    match failure {
        Some(message) => Err(CliError::runtime(message)),
        None => Ok(()),
    }
}

fn slug(method: &str) -> String {
    let mut s = String::new();
    for c in method.to_ascii_lowercase().chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c);
        } else if !s.ends_with('-') {
            s.push('-');
        }
    }
    s.trim_matches('-').replace("w-o", "wo")
}

pub fn eval(cfg: &Config, dataset_path: &Path, format: DatasetFormat, persist: bool) -> Result<(), CliError> {
    if !dataset_path.is_file() {
        return Err(CliError::missing(format!("dataset not found: {}", dataset_path.display())));
    }
    let dataset = eval::load_dataset(dataset_path, format).map_err(|e| match e {
        EvalError::UnsupportedFormat(_) => CliError::usage(e.to_string()),
        _ => CliError::runtime(format!("{}: {e}", dataset_path.display())),
    })?;
    let embedder = cfg.embedder()?;
    let stores = load_stores(cfg, embedder.as_ref())?;
    let gateway = cfg.gateway()?;
    let solver_config = cfg.solver_config();
    let method = cfg.method_label();
    let name = dataset_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let out_dir = cfg.run_dir.join(format!("{name}-{}", slug(&method)));
    let trace_dir = out_dir.join("traces");
    std::fs::create_dir_all(&trace_dir).map_err(|e| CliError::runtime(format!("{}: {e}", trace_dir.display())))?;

    let parallelism = cfg.parallelism.min(gateway.parallelism()).max(1);
    let results = eval::run_benchmark(
        &dataset,
        |ex| {
            let outcome = solve(&ex.id, &ex.question, &solver_config, &stores, &gateway, embedder.as_ref());
            let (qt, failure) = match outcome {
                Ok(t) => (t, None),
                Err(e) => {
                    let message = e.to_string();
                    (e.into_partial(), Some(message))
                }
            };
            write_trace(&trace_dir, &qt).map_err(|e| e.message)?;
            match failure {
                Some(m) => Err(m),
                None => Ok(qt.final_answer),
            }
        },
        parallelism,
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;

    let config_json = serde_json::to_value(cfg).map_err(|e| CliError::runtime(e.to_string()))?;
    let report = RunReport::from_results(&name, &method, results, config_json);
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(e.to_string()))? + "\n";
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, json).map_err(|e| CliError::runtime(format!("{}: {e}", report_path.display())))?;

    let mut references = Vec::new();
    if let Some((em, f1)) = eval::reference_for(format.as_str()) {
        references.push((format!("reference ({}, full)", format.as_str()), em, f1));
    }
    if format == DatasetFormat::Hotpotqa {
        for (arm, em, f1) in eval::REFERENCE_ABLATIONS.iter().skip(1) {
            references.push((format!("reference ({arm})"), *em, *f1));
        }
    }
    let table = eval::render_table(std::slice::from_ref(&report), &references);
    let table_path = out_dir.join("report.txt");
    std::fs::write(&table_path, &table).map_err(|e| CliError::runtime(format!("{}: {e}", table_path.display())))?;

    if persist {
        save_updates(cfg, &stores, embedder.as_ref())?;
    }
    if report.failures > 0 {
        eprintln!("{} of {} questions failed and scored zero", report.failures, report.n);
    }
    println!("{}", report.summary_line());
    println!("report: {}", report_path.display());
    Ok(())
}

fn load_graph(cfg: &Config) -> Result<KnowledgeGraph, CliError> {
    let path = cfg.snapshot_dir.join(GRAPH_FILE);
    if !path.is_file() {
        return Err(no_snapshot(&cfg.snapshot_dir));
    }
    KnowledgeGraph::snapshot_load(&path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn graph_stats(cfg: &Config) -> Result<(), CliError> {
    let stats = load_graph(cfg)?.stats();
    println!("triples {}", stats.triple_count);
    println!("entities {}", stats.entity_count);
    println!("dynamic {}", stats.dynamic_count);
    Ok(())
}

pub fn graph_export(cfg: &Config, format: ExportFormat, output: Option<&Path>) -> Result<(), CliError> {
    let graph = load_graph(cfg)?;
    let write = |out: Box<dyn Write>| -> Result<(), StoreError> {
        let mut out = BufWriter::new(out);
        match format {
            ExportFormat::Json => graph.write_jsonl(&mut out)?,
            ExportFormat::Edgelist => graph.write_edgelist(&mut out)?,
        }
        out.flush()?;
        Ok(())
    };
    let sink: Box<dyn Write> = match output {
        Some(path) => Box::new(File::create(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?),
        None => Box::new(io::stdout()),
    };
    write(sink).map_err(|e| CliError::runtime(e.to_string()))
}
