//! Exact cosine top-k over embedded texts.
//!
//! Two instances are used by the pipeline: one keyed by triple id over
//! verbalized triples and one keyed by corpus position over whole documents.
//! Search is a full scan; ties break by ascending key.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kg_store::{collapse_whitespace, Triple};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedder error: {0}")]
    Embed(#[from] EmbedError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("snapshot was built with embedder {found}, expected {expected}")]
    EmbedderMismatch { expected: String, found: String },
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("no fixture vector for text {0:?}")]
    UnknownText(String),
    #[error("embedding backend failed: {0}")]
    Backend(String),
    #[error("embedding has dimension {actual}, expected {expected}")]
    Dimension { expected: usize, actual: usize },
}

/// Dense vector plus its cached Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Embedding { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity, 0 when either side has zero norm.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        (dot / (self.norm * other.norm)).clamp(-1.0, 1.0)
    }
}

/// Text embedding model. Must return identical vectors for identical text
/// within one process.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

/// `"head relation tail"` with single spaces.
pub fn verbalize_triple(t: &Triple) -> String {
    collapse_whitespace(&format!("{} {} {}", t.head, t.relation, t.tail))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub key: u64,
    pub text: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredKey {
    pub key: u64,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarHeader {
    embedder: String,
    dimension: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct SidecarRecord {
    key: u64,
    text: String,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    dimension: Option<usize>,
    entries: BTreeMap<u64, IndexEntry>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, key: u64) -> Option<&IndexEntry> {
        self.entries.get(&key)
    }

    fn check_dimension(&self, actual: usize) -> Result<(), IndexError> {
        match self.dimension {
            Some(expected) if expected != actual => {
                Err(IndexError::DimensionMismatch { expected, actual })
            }
            _ => Ok(()),
        }
    }

    /// Embed `text` and store it under `key`, replacing any previous entry.
    pub fn upsert(&mut self, key: u64, text: &str, embedder: &dyn Embedder) -> Result<(), IndexError> {
        self.check_dimension(embedder.dimension())?;
        let embedding = embedder.embed(text)?;
        self.upsert_embedding(key, text, embedding)
    }

    pub fn upsert_embedding(&mut self, key: u64, text: &str, embedding: Embedding) -> Result<(), IndexError> {
        self.check_dimension(embedding.dimension())?;
        self.dimension = Some(embedding.dimension());
        self.entries.insert(
            key,
            IndexEntry {
                key,
                text: text.to_string(),
                embedding,
            },
        );
        Ok(())
    }

    /// The `k` highest cosine scores against an already-embedded query.
    pub fn top_k_embedding(&self, query: &Embedding, k: usize) -> Result<Vec<ScoredKey>, IndexError> {
        if self.entries.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        self.check_dimension(query.dimension())?;
        let mut scored: Vec<ScoredKey> = self
            .entries
            .values()
            .map(|e| ScoredKey {
                key: e.key,
                score: query.cosine(&e.embedding),
            })
            .collect();
        let by_rank = |a: &ScoredKey, b: &ScoredKey| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.key.cmp(&b.key))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(scored)
    }

    pub fn top_k(&self, query_text: &str, k: usize, embedder: &dyn Embedder) -> Result<Vec<ScoredKey>, IndexError> {
        if self.entries.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let query = embedder.embed(query_text)?;
        self.top_k_embedding(&query, k)
    }

    /// Line-JSON sidecar: a header naming the embedder, then one record per entry.
    pub fn write_sidecar<W: Write>(&self, embedder_name: &str, dimension: usize, mut out: W) -> Result<(), IndexError> {
        let header = SidecarHeader {
            embedder: embedder_name.to_string(),
            dimension,
            count: self.entries.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).map_err(io::Error::other)?)?;
        for e in self.entries.values() {
            let rec = SidecarRecord {
                key: e.key,
                text: e.text.clone(),
                values: e.embedding.values.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).map_err(io::Error::other)?)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_sidecar(&self, path: &Path, embedder: &dyn Embedder) -> Result<(), IndexError> {
        let file = File::create(path)?;
        self.write_sidecar(embedder.name(), embedder.dimension(), BufWriter::new(file))
    }

    /// Load a sidecar, refusing it unless it was written by an embedder with
    /// the same name and dimension.
    pub fn read_sidecar<R: BufRead>(input: R, embedder_name: &str, dimension: usize) -> Result<Self, IndexError> {
        let mut lines = input.lines().enumerate();
        let parse_err = |line: usize, e: serde_json::Error| IndexError::Parse {
            line,
            message: e.to_string(),
        };
        let header: SidecarHeader = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| parse_err(1, e))?,
            None => {
                return Err(IndexError::Parse {
                    line: 1,
                    message: "missing manifest header".into(),
                })
            }
        };
        if header.embedder != embedder_name || header.dimension != dimension {
            return Err(IndexError::EmbedderMismatch {
                expected: format!("{embedder_name}/{dimension}"),
                found: format!("{}/{}", header.embedder, header.dimension),
            });
        }
        let mut index = VectorIndex::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarRecord = serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, e))?;
            if rec.values.len() != dimension {
                return Err(IndexError::Parse {
                    line: idx + 1,
                    message: format!("vector has {} values, expected {dimension}", rec.values.len()),
                });
            }
            index.upsert_embedding(rec.key, &rec.text, Embedding::new(rec.values))?;
        }
        if index.len() != header.count {
            return Err(IndexError::Parse {
                line: 1,
                message: format!("header promises {} entries, found {}", header.count, index.len()),
            });
        }
        Ok(index)
    }

    pub fn load_sidecar(path: &Path, embedder: &dyn Embedder) -> Result<Self, IndexError> {
        let file = File::open(path)?;
        Self::read_sidecar(BufReader::new(file), embedder.name(), embedder.dimension())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::FixtureEmbedder;

    fn fixture(pairs: &[(&str, Vec<f64>)]) -> FixtureEmbedder {
        let dim = pairs[0].1.len();
        FixtureEmbedder::new(dim, pairs.iter().map(|(t, v)| (t.to_string(), v.clone())))
    }

    fn triple(h: &str, r: &str, t: &str) -> Triple {
        Triple {
            id: 0,
            head: h.into(),
            relation: r.into(),
            tail: t.into(),
            provenance: "doc:1".into(),
            created_at_step: 0,
        }
    }

    #[test]
    fn verbalize_joins_with_single_spaces() {
        assert_eq!(
            verbalize_triple(&triple("Inception", "directed by", "Christopher Nolan")),
            "Inception directed by Christopher Nolan"
        );
        assert_eq!(verbalize_triple(&triple(" A ", "b", "C")), "A b C");
        assert_eq!(verbalize_triple(&triple("A", "b  c", "D")), "A b c D");
    }

    #[test]
    fn orthogonal_and_diagonal_queries() {
        let emb = fixture(&[
            ("x", vec![1.0, 0.0]),
            ("y", vec![0.0, 1.0]),
            ("both", vec![1.0, 1.0]),
        ]);
        let mut idx = VectorIndex::new();
        idx.upsert(0, "x", &emb).unwrap();
        idx.upsert(1, "y", &emb).unwrap();

        let hits = idx.top_k("x", 1, &emb).unwrap();
        assert_eq!(hits, vec![ScoredKey { key: 0, score: 1.0 }]);

        let hits = idx.top_k("both", 2, &emb).unwrap();
        assert_eq!(hits.iter().map(|h| h.key).collect::<Vec<_>>(), vec![0, 1]);
        for h in hits {
            assert!((h.score - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
    }

    #[test]
    fn upsert_replaces_entry() {
        let emb = fixture(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]);
        let mut idx = VectorIndex::new();
        idx.upsert(0, "x", &emb).unwrap();
        idx.upsert(0, "y", &emb).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.get(0).unwrap().text, "y");
        assert_eq!(idx.top_k("y", 1, &emb).unwrap()[0].score, 1.0);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let two = fixture(&[("x", vec![1.0, 0.0])]);
        let three = fixture(&[("z", vec![1.0, 0.0, 0.0])]);
        let mut idx = VectorIndex::new();
        idx.upsert(0, "x", &two).unwrap();
        assert!(matches!(
            idx.upsert(1, "z", &three),
            Err(IndexError::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn empty_index_returns_nothing() {
        let emb = fixture(&[("x", vec![1.0, 0.0])]);
        assert!(VectorIndex::new().top_k("x", 5, &emb).unwrap().is_empty());
    }

    #[test]
    fn zero_norm_scores_zero() {
        let emb = fixture(&[("zero", vec![0.0, 0.0]), ("x", vec![1.0, 0.0])]);
        let mut idx = VectorIndex::new();
        idx.upsert(3, "zero", &emb).unwrap();
        idx.upsert(4, "x", &emb).unwrap();
        let hits = idx.top_k("zero", 2, &emb).unwrap();
        assert_eq!(hits, vec![ScoredKey { key: 3, score: 0.0 }, ScoredKey { key: 4, score: 0.0 }]);
    }

    #[test]
    fn k_larger_than_index() {
        let emb = fixture(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]);
        let mut idx = VectorIndex::new();
        idx.upsert(0, "x", &emb).unwrap();
        assert_eq!(idx.top_k("y", 5, &emb).unwrap().len(), 1);
    }

    #[test]
    fn sidecar_round_trip_and_identity_check() {
        let emb = fixture(&[("x", vec![0.1, 0.7]), ("y", vec![-3.25, 1e-17])]);
        let mut idx = VectorIndex::new();
        idx.upsert(0, "x", &emb).unwrap();
        idx.upsert(9, "y", &emb).unwrap();
        let mut buf = Vec::new();
        idx.write_sidecar(emb.name(), emb.dimension(), &mut buf).unwrap();
        let back = VectorIndex::read_sidecar(buf.as_slice(), emb.name(), 2).unwrap();
        assert_eq!(back, idx);
        assert!(matches!(
            VectorIndex::read_sidecar(buf.as_slice(), "other", 2),
            Err(IndexError::EmbedderMismatch { .. })
        ));
        assert!(matches!(
            VectorIndex::read_sidecar(buf.as_slice(), emb.name(), 3),
            Err(IndexError::EmbedderMismatch { .. })
        ));
    }
}
