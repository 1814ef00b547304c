//! The live stores a question is answered against, and their on-disk layout.
//!
//! The graph and the triple index change together on write-back, so they
//! sit behind one reader-writer lock. Passages and the corpus are read-only
//! after indexing.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::indexer::{Corpus, CorpusError, IndexBuild, IndexReport};
use crate::kg_store::{KnowledgeGraph, StoreError};
use crate::vector_index::{Embedder, IndexError, VectorIndex};

pub const GRAPH_FILE: &str = "graph.jsonl";
pub const TRIPLE_EMBEDDINGS_FILE: &str = "triple_embeddings.jsonl";
pub const PASSAGE_EMBEDDINGS_FILE: &str = "passage_embeddings.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: StoreError },
    #[error("{path}: {source}")]
    Index { path: PathBuf, source: IndexError },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("snapshot is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    pub graph: KnowledgeGraph,
    pub triples: VectorIndex,
}

impl GraphState {
    /// Every graph id is embedded and nothing else is.
    pub fn check_consistency(&self) -> Result<(), String> {
        let graph_ids: BTreeSet<u64> = self.graph.triples().iter().map(|t| t.id).collect();
        let index_ids: BTreeSet<u64> = self.triples.keys().collect();
        if graph_ids == index_ids {
            Ok(())
        } else {
            let missing: Vec<_> = graph_ids.difference(&index_ids).take(5).collect();
            let orphans: Vec<_> = index_ids.difference(&graph_ids).take(5).collect();
            Err(format!("unembedded triples {missing:?}, orphan embeddings {orphans:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub corpus_path: String,
    pub corpus_sha256: String,
    pub embedder: String,
    pub dimension: usize,
    pub documents: usize,
    pub triples: usize,
    pub report: IndexReport,
    pub created_at: String,
}

impl IndexManifest {
    pub fn new(corpus_path: &Path, build: &IndexBuild, embedder: &dyn Embedder, documents: usize) -> io::Result<Self> {
        let bytes = std::fs::read(corpus_path)?;
        Ok(IndexManifest {
            corpus_path: corpus_path.display().to_string(),
            corpus_sha256: hex::encode(Sha256::digest(&bytes)),
            embedder: embedder.name().to_string(),
            dimension: embedder.dimension(),
            documents,
            triples: build.graph.len(),
            report: build.report.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
        })
    }
}

#[derive(Debug)]
pub struct Stores {
    state: RwLock<GraphState>,
    passages: VectorIndex,
    corpus: Corpus,
}

impl Stores {
    pub fn new(graph: KnowledgeGraph, triples: VectorIndex, passages: VectorIndex, corpus: Corpus) -> Self {
        Stores {
            state: RwLock::new(GraphState { graph, triples }),
            passages,
            corpus,
        }
    }

    pub fn from_build(build: IndexBuild, corpus: Corpus) -> Self {
        Stores::new(build.graph, build.triple_index, build.passage_index, corpus)
    }

    pub fn read(&self) -> RwLockReadGuard<'_, GraphState> {
        self.state.read().expect("graph lock poisoned")
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, GraphState> {
        self.state.write().expect("graph lock poisoned")
    }

    pub fn passages(&self) -> &VectorIndex {
        &self.passages
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn graph_snapshot(&self) -> KnowledgeGraph {
        self.read().graph.clone()
    }

    /// True when `dir` already holds a graph snapshot.
    pub fn exists_in(dir: &Path) -> bool {
        dir.join(GRAPH_FILE).is_file()
    }

    /// Write graph, embeddings and corpus into `dir`. The manifest, when
    /// given, is written last.
    pub fn save_dir(&self, dir: &Path, embedder: &dyn Embedder, manifest: Option<&IndexManifest>) -> Result<(), SnapshotError> {
        std::fs::create_dir_all(dir).map_err(|source| SnapshotError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let state = self.read();
        let path = dir.join(GRAPH_FILE);
        state
            .graph
            .snapshot_save(&path)
            .map_err(|source| SnapshotError::Graph { path, source })?;
        let path = dir.join(TRIPLE_EMBEDDINGS_FILE);
        state
            .triples
            .save_sidecar(&path, embedder)
            .map_err(|source| SnapshotError::Index { path, source })?;
        let path = dir.join(PASSAGE_EMBEDDINGS_FILE);
        self.passages
            .save_sidecar(&path, embedder)
            .map_err(|source| SnapshotError::Index { path, source })?;
        let path = dir.join(CORPUS_FILE);
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SnapshotError::Io { path, source }
        };
        let file = File::create(&path).map_err(io_err(&path))?;
        self.corpus.write_jsonl(BufWriter::new(file)).map_err(io_err(&path))?;
        if let Some(manifest) = manifest {
            let path = dir.join(MANIFEST_FILE);
            let text = serde_json::to_string_pretty(manifest).map_err(|e| SnapshotError::Manifest {
                path: path.clone(),
                message: e.to_string(),
            })?;
            std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path, embedder: &dyn Embedder) -> Result<Self, SnapshotError> {
        let path = dir.join(GRAPH_FILE);
        let graph = KnowledgeGraph::snapshot_load(&path).map_err(|source| SnapshotError::Graph { path, source })?;
        let path = dir.join(TRIPLE_EMBEDDINGS_FILE);
        let triples = VectorIndex::load_sidecar(&path, embedder).map_err(|source| SnapshotError::Index { path, source })?;
        let path = dir.join(PASSAGE_EMBEDDINGS_FILE);
        let passages = VectorIndex::load_sidecar(&path, embedder).map_err(|source| SnapshotError::Index { path, source })?;
        let path = dir.join(CORPUS_FILE);
        let file = File::open(&path).map_err(|source| SnapshotError::Io {
            path: path.clone(),
            source,
        })?;
        let corpus = Corpus::from_reader(BufReader::new(file)).map_err(|source| SnapshotError::Corpus { path, source })?;
        let state = GraphState { graph, triples };
        state.check_consistency().map_err(SnapshotError::Inconsistent)?;
        if passages.len() != corpus.len() {
            return Err(SnapshotError::Inconsistent(format!(
                "{} passage embeddings for {} documents",
                passages.len(),
                corpus.len()
            )));
        }
        Ok(Stores {
            state: RwLock::new(state),
            passages,
            corpus,
        })
    }

    pub fn load_manifest(dir: &Path) -> Result<IndexManifest, SnapshotError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| SnapshotError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SnapshotError::Manifest {
            path,
            message: e.to_string(),
        })
    }
}
