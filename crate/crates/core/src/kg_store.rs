//! Append-only, deduplicating triple store.
//!
//! Every stored [`Triple`] gets a dense id in insertion order. Two triples are
//! the same fact when their [`DedupKey`]s match: each field lowercased with
//! runs of whitespace collapsed to a single space. Nothing is ever removed or
//! rewritten once inserted, so ids handed out earlier stay valid for the life
//! of the graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Provenance prefix for triples written back while answering a question.
pub const DYNAMIC_PREFIX: &str = "dynamic:";

pub type TripleId = u64;

pub fn doc_provenance(doc_id: &str) -> String {
    format!("doc:{doc_id}")
}

pub fn dynamic_provenance(question_id: &str) -> String {
    format!("{DYNAMIC_PREFIX}{question_id}")
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("triple field `{0}` is empty after trimming")]
    EmptyField(&'static str),
    #[error("unknown triple id {0}")]
    UnknownId(TripleId),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line} duplicates the dedup key of triple {existing}")]
    DuplicateKey { line: usize, existing: TripleId },
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// One `(head, relation, tail)` fact.
///
/// Serialized field order is fixed; the snapshot format depends on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub id: TripleId,
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub provenance: String,
    /// 0 for offline indexing, otherwise the sub-question step that wrote it.
    #[serde(rename = "step")]
    pub created_at_step: u32,
}

impl Triple {
    pub fn dedup_key(&self) -> DedupKey {
        DedupKey::new(&self.head, &self.relation, &self.tail)
    }

    pub fn is_dynamic(&self) -> bool {
        self.provenance.starts_with(DYNAMIC_PREFIX)
    }
}

/// Collapse every run of whitespace to one space and trim the ends.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fold(s: &str) -> String {
    collapse_whitespace(s).to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey(String, String, String);

impl DedupKey {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        DedupKey(fold(head), fold(relation), fold(tail))
    }
}

/// Check and clean the three fields of a candidate triple.
pub fn clean_fields(head: &str, relation: &str, tail: &str) -> Result<(String, String, String)> {
    let head = collapse_whitespace(head);
    let relation = collapse_whitespace(relation);
    let tail = collapse_whitespace(tail);
    if head.is_empty() {
        return Err(StoreError::EmptyField("head"));
    }
    if relation.is_empty() {
        return Err(StoreError::EmptyField("relation"));
    }
    if tail.is_empty() {
        return Err(StoreError::EmptyField("tail"));
    }
    Ok((head, relation, tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub triple_count: usize,
    pub entity_count: usize,
    pub dynamic_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    key_index: HashMap<DedupKey, TripleId>,
    entity_index: BTreeMap<String, BTreeSet<TripleId>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Insert a triple unless an equivalent one is already stored.
    ///
    /// Returns the id of the stored triple and whether it was new.
    pub fn insert_triple(
        &mut self,
        head: &str,
        relation: &str,
        tail: &str,
        provenance: &str,
        step: u32,
    ) -> Result<(TripleId, bool)> {
        let (head, relation, tail) = clean_fields(head, relation, tail)?;
        let key = DedupKey::new(&head, &relation, &tail);
        if let Some(&id) = self.key_index.get(&key) {
            return Ok((id, false));
        }
        let id = self.triples.len() as TripleId;
        self.push_unchecked(
            key,
            Triple {
                id,
                head,
                relation,
                tail,
                provenance: provenance.to_string(),
                created_at_step: step,
            },
        );
        Ok((id, true))
    }

    fn push_unchecked(&mut self, key: DedupKey, triple: Triple) {
        let id = triple.id;
        self.entity_index.entry(fold(&triple.head)).or_default().insert(id);
        self.entity_index.entry(fold(&triple.tail)).or_default().insert(id);
        self.key_index.insert(key, id);
        self.triples.push(triple);
    }

    pub fn contains_key(&self, key: &DedupKey) -> Option<TripleId> {
        self.key_index.get(key).copied()
    }

    pub fn lookup(&self, id: TripleId) -> Result<&Triple> {
        usize::try_from(id)
            .ok()
            .and_then(|i| self.triples.get(i))
            .ok_or(StoreError::UnknownId(id))
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Ids of the triples mentioning an entity as head or tail.
    pub fn triples_for_entity(&self, entity: &str) -> Vec<TripleId> {
        self.entity_index
            .get(&fold(entity))
            .map(|ids| ids.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            triple_count: self.triples.len(),
            entity_count: self.entity_index.len(),
            dynamic_count: self.triples.iter().filter(|t| t.is_dynamic()).count(),
        }
    }

    /// Write one JSON record per triple, in id order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for triple in &self.triples {
            let line = serde_json::to_string(triple).map_err(io::Error::other)?;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn snapshot_save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        self.write_jsonl(BufWriter::new(file))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut graph = KnowledgeGraph::new();
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Triple = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let (head, relation, tail) = clean_fields(&record.head, &record.relation, &record.tail)
                .map_err(|e| StoreError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            if record.id != graph.triples.len() as TripleId {
                return Err(StoreError::Parse {
                    line: line_no,
                    message: format!(
                        "expected id {} but found {}",
                        graph.triples.len(),
                        record.id
                    ),
                });
            }
            let key = DedupKey::new(&head, &relation, &tail);
            if let Some(&existing) = graph.key_index.get(&key) {
                return Err(StoreError::DuplicateKey {
                    line: line_no,
                    existing,
                });
            }
            // keep the stored surface form so save(load(x)) reproduces x
            graph.push_unchecked(key, record);
        }
        Ok(graph)
    }

    pub fn snapshot_load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_jsonl(BufReader::new(file))
    }

    /// `head\trelation\ttail`, one line per triple.
    pub fn write_edgelist<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.triples {
            writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_of(triples: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (h, r, t) in triples {
            g.insert_triple(h, r, t, "doc:test", 0).unwrap();
        }
        g
    }

    #[test]
    fn first_insert_gets_id_zero() {
        let mut g = KnowledgeGraph::new();
        let res = g
            .insert_triple("Barack Obama", "born in", "Honolulu", "doc:1", 0)
            .unwrap();
        assert_eq!(res, (0, true));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn repeated_insert_is_idempotent() {
        let mut g = KnowledgeGraph::new();
        g.insert_triple("Barack Obama", "born in", "Honolulu", "doc:1", 0).unwrap();
        let before = g.clone();
        let res = g
            .insert_triple("Barack Obama", "born in", "Honolulu", "doc:2", 1)
            .unwrap();
        assert_eq!(res, (0, false));
        assert_eq!(g, before);
    }

    #[test]
    fn case_and_whitespace_variants_dedup() {
        let mut g = KnowledgeGraph::new();
        g.insert_triple("Barack Obama", "born in", "Honolulu", "doc:1", 0).unwrap();
        let res = g
            .insert_triple("barack  OBAMA", "Born In", "honolulu", "doc:1", 0)
            .unwrap();
        assert_eq!(res, (0, false));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn empty_fields_rejected() {
        let mut g = KnowledgeGraph::new();
        assert!(matches!(
            g.insert_triple("  ", "r", "t", "doc:1", 0),
            Err(StoreError::EmptyField("head"))
        ));
        assert!(matches!(
            g.insert_triple("h", "r", "\t", "doc:1", 0),
            Err(StoreError::EmptyField("tail"))
        ));
        assert!(g.is_empty());
    }

    #[test]
    fn lookup_by_insertion_order() {
        let g = graph_of(&[("A", "r", "B"), ("B", "r", "C"), ("C", "r", "D")]);
        assert_eq!(g.lookup(2).unwrap().head, "C");
        assert_eq!(g.lookup(0).unwrap().tail, "B");
        assert!(matches!(KnowledgeGraph::new().lookup(0), Err(StoreError::UnknownId(0))));
        assert!(matches!(g.lookup(3), Err(StoreError::UnknownId(3))));
    }

    #[test]
    fn stats_count_entities_and_dynamic() {
        let mut g = KnowledgeGraph::new();
        assert_eq!(
            g.stats(),
            GraphStats { triple_count: 0, entity_count: 0, dynamic_count: 0 }
        );
        g.insert_triple("A", "r", "B", "doc:1", 0).unwrap();
        assert_eq!(
            g.stats(),
            GraphStats { triple_count: 1, entity_count: 2, dynamic_count: 0 }
        );
        g.insert_triple("B", "r2", "C", &dynamic_provenance("q1"), 1).unwrap();
        assert_eq!(
            g.stats(),
            GraphStats { triple_count: 2, entity_count: 3, dynamic_count: 1 }
        );
        assert_eq!(g.triples_for_entity("b"), vec![0, 1]);
    }

    #[test]
    fn snapshot_has_fixed_field_order() {
        let g = graph_of(&[("A", "r", "B")]);
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"id\":0,\"head\":\"A\",\"relation\":\"r\",\"tail\":\"B\",\"provenance\":\"doc:test\",\"step\":0}\n"
        );
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = graph_of(&[("A", "r", "B"), ("Ünïcode \"q\"", "rel", "x\ny")]);
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        g.snapshot_save(&p1).unwrap();
        let loaded = KnowledgeGraph::snapshot_load(&p1).unwrap();
        assert_eq!(loaded, g);
        loaded.snapshot_save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(std::fs::read_to_string(&p1).unwrap().lines().count(), 2);
    }

    #[test]
    fn empty_graph_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        KnowledgeGraph::new().snapshot_save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(KnowledgeGraph::snapshot_load(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            "{\"id\":0,\"head\":\"A\",\"relation\":\"r\",\"tail\":\"B\",\"provenance\":\"doc:1\",\"step\":0}\n",
            "{\"id\":1,\"head\":\"B\",\"relation\":\"r\",\"tail\":\"C\",\"provenance\":\"doc:1\",\"step\":0}\n",
            "{\"id\":2,\"head\":\n",
        );
        let err = KnowledgeGraph::read_jsonl(text.as_bytes()).unwrap_err();
        assert!(matches!(err, StoreError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_keys_in_file_rejected() {
        let text = concat!(
            "{\"id\":0,\"head\":\"A\",\"relation\":\"r\",\"tail\":\"B\",\"provenance\":\"doc:1\",\"step\":0}\n",
            "{\"id\":1,\"head\":\"a\",\"relation\":\"R\",\"tail\":\"b \",\"provenance\":\"doc:2\",\"step\":0}\n",
        );
        let err = KnowledgeGraph::read_jsonl(text.as_bytes()).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateKey { line: 2, existing: 0 }));
    }

    #[test]
    fn edgelist_is_tab_separated() {
        let g = graph_of(&[("A", "r", "B"), ("B", "s", "C")]);
        let mut buf = Vec::new();
        g.write_edgelist(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "A\tr\tB\nB\ts\tC\n");
    }
}
