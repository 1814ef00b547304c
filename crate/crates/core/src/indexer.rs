//! Offline indexing: corpus ingestion, LLM triple extraction, and the initial
//! graph and vector indexes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::kg_store::{clean_fields, doc_provenance, KnowledgeGraph, StoreError};
use crate::llm::{ChatRequest, Gateway, LlmError, Session, Shape, TemplateName};
use crate::vector_index::{verbalize_triple, EmbedError, Embedder, Embedding, IndexError, VectorIndex};

pub const DEFAULT_CHAR_BUDGET: usize = 8_000;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
}

#[derive(Debug, thiserror::Error)]
pub enum IndexerError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    /// Text embedded into the passage index and shown to the model on fallback.
    pub fn passage_text(&self) -> String {
        if self.title.trim().is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.title.trim(), self.text)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    id_index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, doc: Document) -> Result<usize, CorpusError> {
        if self.id_index.contains_key(&doc.id) {
            return Err(CorpusError::DuplicateDocId(doc.id));
        }
        let pos = self.documents.len();
        self.id_index.insert(doc.id.clone(), pos);
        self.documents.push(doc);
        Ok(pos)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, position: usize) -> Option<&Document> {
        self.documents.get(position)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    /// Parse line-delimited `{"id", "title", "text"}` records. Blank lines
    /// are skipped but still counted for error positions.
    pub fn from_reader<R: BufRead>(input: R) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if doc.text.trim().is_empty() {
                return Err(CorpusError::Parse {
                    line: idx + 1,
                    message: format!("document {:?} has empty text", doc.id),
                });
            }
            corpus.push(doc)?;
        }
        Ok(corpus)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for doc in &self.documents {
            writeln!(out, "{}", serde_json::to_string(doc).map_err(io::Error::other)?)?;
        }
        out.flush()
    }
}

pub fn ingest_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    Corpus::from_reader(BufReader::new(File::open(path)?))
}

/// An extracted, validated triple that has not been stored yet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        RawTriple {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub triples: Vec<RawTriple>,
    /// Items dropped for being malformed or having an empty field.
    pub dropped: usize,
}

/// Split text into pieces of at most `budget` characters, preferring
/// paragraph boundaries.
pub fn chunk_text(text: &str, budget: usize) -> Vec<String> {
    let budget = budget.max(1);
    if text.chars().count() <= budget {
        return vec![text.to_string()];
    }
    let mut chunks = Vec::new();
    let mut current = String::new();
    let mut current_len = 0;
    for para in text.split("\n\n").filter(|p| !p.trim().is_empty()) {
        let para_len = para.chars().count();
        if para_len > budget {
            if !current.is_empty() {
                chunks.push(std::mem::take(&mut current));
                current_len = 0;
            }
            let chars: Vec<char> = para.chars().collect();
            chunks.extend(chars.chunks(budget).map(|c| c.iter().collect::<String>()));
            continue;
        }
        let joined_len = if current.is_empty() { para_len } else { current_len + 2 + para_len };
        if joined_len > budget {
            chunks.push(std::mem::take(&mut current));
            current.push_str(para);
            current_len = para_len;
        } else {
            if !current.is_empty() {
                current.push_str("\n\n");
            }
            current.push_str(para);
            current_len = joined_len;
        }
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

fn parse_items(items: Vec<serde_json::Value>, out: &mut Extraction) {
    for item in items {
        let fields: Option<Vec<&str>> = item
            .as_array()
            .filter(|a| a.len() == 3)
            .and_then(|a| a.iter().map(|v| v.as_str()).collect());
        match fields.as_deref() {
            Some([h, r, t]) => match clean_fields(h, r, t) {
                Ok((h, r, t)) => out.triples.push(RawTriple { head: h, relation: r, tail: t }),
                Err(e) => {
                    log::warn!("dropping extracted triple {item}: {e}");
                    out.dropped += 1;
                }
            },
            _ => {
                log::warn!("dropping malformed extraction item {item}");
                out.dropped += 1;
            }
        }
    }
}

/// Run the extraction prompt over `text`, one call per chunk.
pub fn extract_from_text(title: &str, text: &str, session: &Session<'_>, char_budget: usize) -> Result<Extraction, LlmError> {
    let shape = Shape::array_of(Shape::Any);
    let mut out = Extraction::default();
    for chunk in chunk_text(text, char_budget) {
        let req = ChatRequest::new(TemplateName::ExtractTriples)
            .var("title", title)
            .var("text", chunk);
        let items: Vec<serde_json::Value> = session.complete_structured(&req, &shape)?.value;
        parse_items(items, &mut out);
    }
    Ok(out)
}

pub fn extract_triples(doc: &Document, session: &Session<'_>, char_budget: usize) -> Result<Extraction, LlmError> {
    extract_from_text(&doc.title, &doc.text, session, char_budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexOptions {
    pub char_budget: usize,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            char_budget: DEFAULT_CHAR_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexReport {
    pub documents_processed: usize,
    pub triples_extracted: usize,
    pub triples_inserted: usize,
    pub duplicates_skipped: usize,
    pub items_dropped: usize,
    /// Documents whose extraction succeeded but produced nothing.
    pub triple_free: Vec<String>,
    /// `doc:<id>` for each document whose extraction failed.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct IndexBuild {
    pub graph: KnowledgeGraph,
    pub triple_index: VectorIndex,
    pub passage_index: VectorIndex,
    pub report: IndexReport,
}

struct DocWork {
    extraction: Result<Extraction, LlmError>,
    passage: Result<Embedding, EmbedError>,
}

fn process_document(doc: &Document, gateway: &Gateway, embedder: &dyn Embedder, opts: IndexOptions) -> DocWork {
    let session = gateway.session(None);
    DocWork {
        extraction: extract_triples(doc, &session, opts.char_budget),
        passage: embedder.embed(&doc.passage_text()),
    }
}

/// Extract every document, insert in corpus order, and embed triples and
/// passages. Extraction runs on up to `gateway.parallelism()` threads;
/// the resulting graph does not depend on completion order.
pub fn build_graph_index(
    corpus: &Corpus,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    opts: IndexOptions,
) -> Result<IndexBuild, IndexerError> {
    let docs = corpus.documents();
    let slots: Vec<Mutex<Option<DocWork>>> = docs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = gateway.parallelism().min(docs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(doc) = docs.get(i) else { break };
                let work = process_document(doc, gateway, embedder, opts);
                *slots[i].lock().expect("slot lock") = Some(work);
            });
        }
    });

    let mut graph = KnowledgeGraph::new();
    let mut triple_index = VectorIndex::new();
    let mut passage_index = VectorIndex::new();
    let mut report = IndexReport::default();
    for (pos, (doc, slot)) in docs.iter().zip(slots).enumerate() {
        let work = slot.into_inner().expect("slot lock").expect("every document processed");
        report.documents_processed += 1;
        passage_index.upsert_embedding(pos as u64, &doc.passage_text(), work.passage?)?;
        let extraction = match work.extraction {
            Ok(x) => x,
            Err(e) if e.is_fatal() => return Err(e.into()),
            Err(e) => {
                log::warn!("extraction failed for document {}: {e}", doc.id);
                report.failures.push(doc_provenance(&doc.id));
                continue;
            }
        };
        report.items_dropped += extraction.dropped;
        if extraction.triples.is_empty() {
            report.triple_free.push(doc.id.clone());
        }
        let provenance = doc_provenance(&doc.id);
        for raw in extraction.triples {
            report.triples_extracted += 1;
            let (id, inserted) = graph.insert_triple(&raw.head, &raw.relation, &raw.tail, &provenance, 0)?;
            if inserted {
                report.triples_inserted += 1;
                let text = verbalize_triple(graph.lookup(id)?);
                triple_index.upsert(id, &text, embedder)?;
            } else {
                report.duplicates_skipped += 1;
            }
        }
    }
    Ok(IndexBuild {
        graph,
        triple_index,
        passage_index,
        report,
    })
}
