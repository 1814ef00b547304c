//! Answering one question against the stores.
//!
//! For each sub-question in order: rewrite it with the answers so far,
//! retrieve the top-k triples, and ask the model to answer from those triples
//! alone. If it cannot, retrieve whole documents, answer from them, extract
//! new triples and write them back, then retry the graph once. The triples
//! the model cites along the way form the graph memory for the final answer.

mod trace;

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use trace::{Abort, AbortKind, FallbackEvent, GraphMemory, MemoryEntry, QuestionTrace, SubAnswer};

use crate::decomposer::{self, AnswerContext, DecomposeError, DecompositionPlan, DEFAULT_MAX_SUBQUESTIONS};
use crate::indexer::{extract_from_text, Corpus, DEFAULT_CHAR_BUDGET};
use crate::kg_store::{dynamic_provenance, DedupKey, KnowledgeGraph, StoreError, Triple};
use crate::llm::{ChatRequest, Field, Gateway, LlmError, Session, Shape, TemplateName};
use crate::stores::Stores;
use crate::vector_index::{verbalize_triple, Embedder, Embedding, IndexError, ScoredKey, VectorIndex};

/// Answer used when nothing better is available.
pub const UNKNOWN: &str = "UNKNOWN";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub k_triples: usize,
    pub k_docs: usize,
    pub max_subquestions: usize,
    pub llm_budget: u32,
    pub char_budget: usize,
    /// Off: answer the whole question as one step.
    pub decompose: bool,
    /// Off: substitute `#j` placeholders literally, no model rewrite.
    pub rewrite: bool,
    /// Off: fallback answers come from documents and nothing is written back.
    pub update_graph: bool,
    /// Wall-clock time in traces. Off keeps scripted traces byte-stable.
    pub record_timing: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            k_triples: 5,
            k_docs: 5,
            max_subquestions: DEFAULT_MAX_SUBQUESTIONS,
            llm_budget: 25,
            char_budget: DEFAULT_CHAR_BUDGET,
            decompose: true,
            rewrite: true,
            update_graph: true,
            record_timing: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("LLM call budget of {budget} exhausted")]
    BudgetExceeded { budget: u32, partial: Box<QuestionTrace> },
    #[error("sub-question refers to #{index}, which has no answer")]
    MissingDependency { index: usize, partial: Box<QuestionTrace> },
    #[error("internal error: {message}")]
    Internal { message: String, partial: Box<QuestionTrace> },
}

impl SolveError {
    pub fn partial(&self) -> &QuestionTrace {
        match self {
            SolveError::BudgetExceeded { partial, .. }
            | SolveError::MissingDependency { partial, .. }
            | SolveError::Internal { partial, .. } => partial,
        }
    }

    pub fn into_partial(self) -> QuestionTrace {
        match self {
            SolveError::BudgetExceeded { partial, .. }
            | SolveError::MissingDependency { partial, .. }
            | SolveError::Internal { partial, .. } => *partial,
        }
    }
}

/// Exact top-k over the triple index.
pub fn retrieve_for_subquestion(
    question: &str,
    triple_index: &VectorIndex,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<ScoredKey>, IndexError> {
    triple_index.top_k(question, k, embedder)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerAttempt {
    pub answerable: bool,
    pub answer: String,
    pub used_triple_ids: Vec<u64>,
}

impl AnswerAttempt {
    fn unanswerable() -> Self {
        AnswerAttempt {
            answerable: false,
            answer: String::new(),
            used_triple_ids: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct TripleAnswerReply {
    answerable: bool,
    #[serde(default)]
    answer: String,
    #[serde(default)]
    used_triple_ids: Vec<u64>,
}

fn triple_answer_shape() -> Shape {
    Shape::Object(vec![
        Field::required("answerable", Shape::Bool),
        Field::optional("answer", Shape::String),
        Field::optional("used_triple_ids", Shape::array_of(Shape::Integer)),
    ])
}

pub fn render_candidates(candidates: &[(Triple, f64)]) -> String {
    candidates
        .iter()
        .map(|(t, _)| format!("{}. {} | {} | {}", t.id, t.head, t.relation, t.tail))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Ask the model to answer from the candidate triples only.
///
/// Cited ids outside the candidates are dropped; an answer left without
/// evidence counts as unanswerable. Only fatal gateway errors propagate.
pub fn answer_from_triples(
    question: &str,
    candidates: &[(Triple, f64)],
    session: &Session<'_>,
) -> Result<AnswerAttempt, LlmError> {
    if candidates.is_empty() {
        return Ok(AnswerAttempt::unanswerable());
    }
    let req = ChatRequest::new(TemplateName::AnswerFromTriples)
        .var("question", question)
        .var("triples", render_candidates(candidates));
    let reply: TripleAnswerReply = match session.complete_structured(&req, &triple_answer_shape()) {
        Ok(r) => r.value,
        Err(e) if e.is_fatal() => return Err(e),
        Err(e) => {
            session.degrade("answer_from_triples", format!("{e}; treating as unanswerable"));
            return Ok(AnswerAttempt::unanswerable());
        }
    };
    let cited: HashSet<u64> = reply.used_triple_ids.iter().copied().collect();
    let used: Vec<u64> = candidates
        .iter()
        .map(|(t, _)| t.id)
        .filter(|id| cited.contains(id))
        .collect();
    if used.len() != cited.len() {
        let offered: HashSet<u64> = candidates.iter().map(|(t, _)| t.id).collect();
        let foreign: Vec<u64> = reply.used_triple_ids.iter().copied().filter(|id| !offered.contains(id)).collect();
        session.degrade("answer_from_triples", format!("ignoring cited ids {foreign:?} that were not offered"));
    }
    let answer = reply.answer.trim().to_string();
    if !reply.answerable || used.is_empty() || answer.is_empty() {
        return Ok(AnswerAttempt::unanswerable());
    }
    Ok(AnswerAttempt {
        answerable: true,
        answer,
        used_triple_ids: used,
    })
}

#[derive(Deserialize)]
struct DocAnswerReply {
    #[serde(default)]
    answer: String,
}

/// Answer from the top documents and extract candidate triples from them.
/// Nothing is written to the graph here.
pub fn fallback_answer_from_docs(
    question: &str,
    passages: &VectorIndex,
    corpus: &Corpus,
    session: &Session<'_>,
    embedder: &dyn Embedder,
    k_docs: usize,
    char_budget: usize,
) -> Result<(String, FallbackEvent), LlmError> {
    let mut event = FallbackEvent::default();
    if corpus.is_empty() {
        session.degrade("fallback", "corpus is empty");
        event.doc_answer = UNKNOWN.to_string();
        return Ok((UNKNOWN.to_string(), event));
    }
    let hits = match passages.top_k(question, k_docs, embedder) {
        Ok(h) => h,
        Err(e) => {
            session.degrade("fallback", format!("passage retrieval failed: {e}"));
            Vec::new()
        }
    };
    let docs: Vec<_> = hits
        .iter()
        .filter_map(|h| corpus.get(h.key as usize))
        .collect();
    event.retrieved_doc_ids = docs.iter().map(|d| d.id.clone()).collect();
    if docs.is_empty() {
        session.degrade("fallback", "no documents retrieved");
        event.doc_answer = UNKNOWN.to_string();
        return Ok((UNKNOWN.to_string(), event));
    }
    let rendered = docs
        .iter()
        .map(|d| format!("[{}] {}", d.id, d.passage_text()))
        .collect::<Vec<_>>()
        .join("\n\n");
    let req = ChatRequest::new(TemplateName::AnswerFromDocs)
        .var("question", question)
        .var("documents", rendered);
    let shape = Shape::Object(vec![Field::required("answer", Shape::String)]);
    let answer = match session.complete_structured::<DocAnswerReply>(&req, &shape) {
        Ok(r) => r.value.answer.trim().to_string(),
        Err(e) if e.is_fatal() => return Err(e),
        Err(e) => {
            session.degrade("answer_from_docs", e.to_string());
            String::new()
        }
    };
    let answer = if answer.is_empty() { UNKNOWN.to_string() } else { answer };
    event.doc_answer = answer.clone();

    let joined = docs.iter().map(|d| d.passage_text()).collect::<Vec<_>>().join("\n\n");
    match extract_from_text("", &joined, session, char_budget) {
        Ok(x) => event.new_triples = x.triples,
        Err(e) if e.is_fatal() => return Err(e),
        Err(e) => session.degrade("fallback_extract", e.to_string()),
    }
    Ok((answer, event))
}

/// Write the event's new triples into the graph and triple index.
///
/// Embeddings are computed before taking the write lock; insertion and
/// indexing then happen together under it.
pub fn update_graph_with_new_triples(
    stores: &Stores,
    mut event: FallbackEvent,
    question_id: &str,
    step: u32,
    embedder: &dyn Embedder,
) -> Result<FallbackEvent, IndexError> {
    event.written_back_ids.clear();
    if event.new_triples.is_empty() {
        return Ok(event);
    }
    let fresh: Vec<(usize, DedupKey)> = {
        let state = stores.read();
        let mut seen = HashSet::new();
        event
            .new_triples
            .iter()
            .enumerate()
            .map(|(i, t)| (i, DedupKey::new(&t.head, &t.relation, &t.tail)))
            .filter(|(_, key)| state.graph.contains_key(key).is_none() && seen.insert(key.clone()))
            .collect()
    };
    let mut embedded: Vec<(usize, Embedding)> = Vec::with_capacity(fresh.len());
    for (i, _) in &fresh {
        let t = &event.new_triples[*i];
        let probe = Triple {
            id: 0,
            head: t.head.clone(),
            relation: t.relation.clone(),
            tail: t.tail.clone(),
            provenance: String::new(),
            created_at_step: step,
        };
        embedded.push((*i, embedder.embed(&verbalize_triple(&probe))?));
    }
    let provenance = dynamic_provenance(question_id);
    let mut state = stores.write();
    for (i, embedding) in embedded {
        let t = &event.new_triples[i];
        let (id, inserted) = match state.graph.insert_triple(&t.head, &t.relation, &t.tail, &provenance, step) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping write-back of {t:?}: {e}");
                continue;
            }
        };
        if inserted {
            let text = verbalize_triple(state.graph.lookup(id).expect("just inserted"));
            state.triples.upsert_embedding(id, &text, embedding)?;
            event.written_back_ids.push(id);
        }
    }
    Ok(event)
}

/// Id-deduplicated union of the used triples, ordered by step and then by
/// the order each step cited them.
pub fn assemble_graph_memory(sub_answers: &[SubAnswer], graph: &KnowledgeGraph) -> Result<GraphMemory, StoreError> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for sa in sub_answers {
        for &id in &sa.used_triple_ids {
            if seen.insert(id) {
                entries.push(MemoryEntry {
                    step: sa.index,
                    triple: graph.lookup(id)?.clone(),
                });
            }
        }
    }
    Ok(GraphMemory { entries })
}

pub const NO_EVIDENCE: &str = "(no evidence retrieved)";

pub fn render_memory(memory: &GraphMemory) -> String {
    if memory.is_empty() {
        return NO_EVIDENCE.to_string();
    }
    memory
        .entries
        .iter()
        .map(|e| format!("step {}: {} | {} | {}", e.step, e.triple.head, e.triple.relation, e.triple.tail))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn generate_final_answer(question: &str, memory: &GraphMemory, session: &Session<'_>) -> Result<String, LlmError> {
    let req = ChatRequest::new(TemplateName::FinalAnswer)
        .var("question", question)
        .var("memory", render_memory(memory));
    match session.complete(&req) {
        Ok(resp) => {
            let line = resp.text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
            Ok(if line.is_empty() { UNKNOWN.to_string() } else { line.to_string() })
        }
        Err(e) if e.is_fatal() => Err(e),
        Err(e) => {
            session.degrade("final_answer", e.to_string());
            Ok(UNKNOWN.to_string())
        }
    }
}

fn candidates_for(stores: &Stores, hits: &[ScoredKey]) -> Vec<(Triple, f64)> {
    let state = stores.read();
    hits.iter()
        .filter_map(|h| state.graph.lookup(h.key).ok().map(|t| (t.clone(), h.score)))
        .collect()
}

enum StepFailure {
    Llm(LlmError),
    Missing(usize),
    Internal(String),
}

impl From<LlmError> for StepFailure {
    fn from(e: LlmError) -> Self {
        StepFailure::Llm(e)
    }
}

impl From<DecomposeError> for StepFailure {
    fn from(e: DecomposeError) -> Self {
        match e {
            DecomposeError::MissingDependency(j) => StepFailure::Missing(j),
            DecomposeError::Llm(e) => StepFailure::Llm(e),
        }
    }
}

struct Run<'a> {
    question_id: &'a str,
    config: SolverConfig,
    stores: &'a Stores,
    embedder: &'a dyn Embedder,
    session: Session<'a>,
}

impl Run<'_> {
    fn retrieve(&self, question: &str) -> Vec<ScoredKey> {
        let state = self.stores.read();
        match retrieve_for_subquestion(question, &state.triples, self.config.k_triples, self.embedder) {
            Ok(hits) => hits,
            Err(e) => {
                self.session.degrade("retrieve", format!("{e}; continuing with no triples"));
                Vec::new()
            }
        }
    }

    fn step(&self, index: usize, sub_question: &str, context: &AnswerContext) -> Result<SubAnswer, StepFailure> {
        let rewritten = if self.config.rewrite {
            decomposer::rewrite(sub_question, context, &self.session)?
        } else {
            decomposer::substitute(sub_question, context)?
        };
        let retrieved = self.retrieve(&rewritten);
        let attempt = answer_from_triples(&rewritten, &candidates_for(self.stores, &retrieved), &self.session)?;
        if attempt.answerable {
            return Ok(SubAnswer {
                index,
                sub_question: sub_question.to_string(),
                rewritten_question: rewritten,
                retrieved,
                answer: attempt.answer,
                answerable_from_graph: true,
                used_triple_ids: attempt.used_triple_ids,
                fallback: None,
            });
        }

        let (doc_answer, mut event) = fallback_answer_from_docs(
            &rewritten,
            self.stores.passages(),
            self.stores.corpus(),
            &self.session,
            self.embedder,
            self.config.k_docs,
            self.config.char_budget,
        )?;
        if self.config.update_graph {
            event = update_graph_with_new_triples(self.stores, event, self.question_id, index as u32, self.embedder)
                .map_err(|e| StepFailure::Internal(format!("write-back failed: {e}")))?;
        }
        let mut answer = doc_answer;
        let mut used = event.written_back_ids.clone();
        let mut from_graph = false;
        if !event.written_back_ids.is_empty() {
            let again = self.retrieve(&rewritten);
            let retry = answer_from_triples(&rewritten, &candidates_for(self.stores, &again), &self.session)?;
            event.reretrieved = Some(again);
            if retry.answerable {
                answer = retry.answer;
                used = retry.used_triple_ids;
                from_graph = true;
            }
        }
        Ok(SubAnswer {
            index,
            sub_question: sub_question.to_string(),
            rewritten_question: rewritten,
            retrieved,
            answer,
            answerable_from_graph: from_graph,
            used_triple_ids: used,
            fallback: Some(event),
        })
    }
}

/// Run the whole pipeline for one question.
///
/// On an abort the error carries the partial trace, with `final_answer` set
/// to [`UNKNOWN`] and the abort reason recorded.
pub fn solve(
    question_id: &str,
    question: &str,
    config: &SolverConfig,
    stores: &Stores,
    gateway: &Gateway,
    embedder: &dyn Embedder,
) -> Result<QuestionTrace, SolveError> {
    let started = Instant::now();
    let run = Run {
        question_id,
        config: *config,
        stores,
        embedder,
        session: gateway.session(Some(config.llm_budget)),
    };
    let graph_triples_before = stores.read().graph.len();
    let cap = config.max_subquestions.max(1);

    let mut sub_answers = Vec::new();
    let mut failure = None;
    let plan = if config.decompose {
        match decomposer::decompose(question, &run.session, cap) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(StepFailure::Llm(e));
                DecompositionPlan::single(question, cap)
            }
        }
    } else {
        DecompositionPlan::single(question, cap)
    };

    let mut context = AnswerContext::new();
    if failure.is_none() {
        for (i, sub_question) in plan.sub_questions.iter().enumerate() {
            match run.step(i + 1, sub_question, &context) {
                Ok(sa) => {
                    context.push(sa.index, sa.answer.clone());
                    sub_answers.push(sa);
                }
                Err(f) => {
                    failure = Some(f);
                    break;
                }
            }
        }
    }

    let memory = {
        let state = stores.read();
        assemble_graph_memory(&sub_answers, &state.graph)
    };
    let memory = match memory {
        Ok(m) => m,
        Err(e) => {
            failure.get_or_insert(StepFailure::Internal(format!("graph memory: {e}")));
            GraphMemory::default()
        }
    };

    let final_answer = if failure.is_none() {
        match generate_final_answer(question, &memory, &run.session) {
            Ok(a) => a,
            Err(e) => {
                failure = Some(StepFailure::Llm(e));
                UNKNOWN.to_string()
            }
        }
    } else {
        UNKNOWN.to_string()
    };

    let abort = failure.as_ref().map(|f| match f {
        StepFailure::Llm(LlmError::BudgetExceeded { .. }) => Abort {
            kind: AbortKind::BudgetExceeded,
            message: format!("LLM call budget of {} exhausted", config.llm_budget),
        },
        StepFailure::Llm(e) => Abort {
            kind: AbortKind::Internal,
            message: e.to_string(),
        },
        StepFailure::Missing(j) => Abort {
            kind: AbortKind::MissingDependency,
            message: format!("sub-question refers to #{j}, which has no answer"),
        },
        StepFailure::Internal(m) => Abort {
            kind: AbortKind::Internal,
            message: m.clone(),
        },
    });

    let trace = QuestionTrace {
        question_id: question_id.to_string(),
        original_question: question.to_string(),
        plan,
        sub_answers,
        memory,
        final_answer,
        abort,
        degradations: run.session.degradations(),
        llm_budget: config.llm_budget,
        usage: run.session.usage(),
        calls: run.session.calls(),
        graph_triples_before,
        graph_triples_after: stores.read().graph.len(),
        elapsed_ms: config.record_timing.then(|| started.elapsed().as_millis() as u64),
    };

    match failure {
        None => Ok(trace),
        Some(StepFailure::Llm(LlmError::BudgetExceeded { budget })) => Err(SolveError::BudgetExceeded {
            budget,
            partial: Box::new(trace),
        }),
        Some(StepFailure::Missing(index)) => Err(SolveError::MissingDependency {
            index,
            partial: Box::new(trace),
        }),
        Some(StepFailure::Llm(e)) => Err(SolveError::Internal {
            message: e.to_string(),
            partial: Box::new(trace),
        }),
        Some(StepFailure::Internal(message)) => Err(SolveError::Internal {
            message,
            partial: Box::new(trace),
        }),
    }
}
