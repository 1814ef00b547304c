//! Per-question records: sub-answers, fallback events, graph memory and the
//! full trace written for each solved question.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::decomposer::DecompositionPlan;
use crate::indexer::RawTriple;
use crate::kg_store::{Triple, TripleId};
use crate::llm::{CallRecord, Degradation, UsageSummary};
use crate::vector_index::ScoredKey;

/// What happened when a sub-question fell back to the documents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FallbackEvent {
    pub retrieved_doc_ids: Vec<String>,
    /// The answer generated from the retrieved documents.
    pub doc_answer: String,
    /// Triples extracted from the retrieved documents, after validation.
    pub new_triples: Vec<RawTriple>,
    /// Ids that were genuinely new and got written into the graph.
    pub written_back_ids: Vec<TripleId>,
    /// Triples retrieved again after the write-back, if that happened.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reretrieved: Option<Vec<ScoredKey>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubAnswer {
    /// 1-based position in the plan.
    pub index: usize,
    pub sub_question: String,
    pub rewritten_question: String,
    pub retrieved: Vec<ScoredKey>,
    pub answer: String,
    /// The answer rests on graph triples, either the first retrieval or the
    /// one after a write-back.
    pub answerable_from_graph: bool,
    /// In retrieval rank order.
    pub used_triple_ids: Vec<TripleId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<FallbackEvent>,
}

impl SubAnswer {
    /// Ids this step may legitimately cite.
    pub fn citable_ids(&self) -> HashSet<TripleId> {
        let mut ids: HashSet<TripleId> = self.retrieved.iter().map(|s| s.key).collect();
        if let Some(fb) = &self.fallback {
            ids.extend(fb.written_back_ids.iter().copied());
            if let Some(again) = &fb.reretrieved {
                ids.extend(again.iter().map(|s| s.key));
            }
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryEntry {
    pub step: usize,
    pub triple: Triple,
}

/// Ordered, id-unique union of the triples used across all steps.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphMemory {
    pub entries: Vec<MemoryEntry>,
}

impl GraphMemory {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> Vec<TripleId> {
        self.entries.iter().map(|e| e.triple.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortKind {
    BudgetExceeded,
    MissingDependency,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Abort {
    pub kind: AbortKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionTrace {
    pub question_id: String,
    pub original_question: String,
    pub plan: DecompositionPlan,
    pub sub_answers: Vec<SubAnswer>,
    pub memory: GraphMemory,
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<Abort>,
    pub degradations: Vec<Degradation>,
    pub llm_budget: u32,
    pub usage: UsageSummary,
    pub calls: Vec<CallRecord>,
    pub graph_triples_before: usize,
    pub graph_triples_after: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

impl QuestionTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes") + "\n"
    }

    /// Parse a trace file and check it against the trace invariants.
    pub fn from_json_validated(text: &str) -> Result<Self, String> {
        let trace: QuestionTrace = serde_json::from_str(text).map_err(|e| e.to_string())?;
        trace.check_invariants()?;
        Ok(trace)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.abort.is_none() && self.sub_answers.len() != self.plan.sub_questions.len() {
            return Err(format!(
                "{} sub-answers for a {}-step plan",
                self.sub_answers.len(),
                self.plan.sub_questions.len()
            ));
        }
        if self.plan.sub_questions.is_empty() || self.plan.sub_questions.len() > self.plan.cap {
            return Err(format!("plan length {} outside 1..={}", self.plan.sub_questions.len(), self.plan.cap));
        }
        let mut used_union = BTreeSet::new();
        for (pos, sa) in self.sub_answers.iter().enumerate() {
            if sa.index != pos + 1 {
                return Err(format!("sub-answer {pos} has index {}", sa.index));
            }
            if sa.sub_question != self.plan.sub_questions[pos] {
                return Err(format!("sub-answer {} does not follow the plan", sa.index));
            }
            let citable = sa.citable_ids();
            if let Some(id) = sa.used_triple_ids.iter().find(|id| !citable.contains(id)) {
                return Err(format!("step {} cites triple {id} it never retrieved", sa.index));
            }
            if sa.answerable_from_graph && sa.used_triple_ids.is_empty() {
                return Err(format!("step {} answered from the graph without evidence", sa.index));
            }
            if !sa.answerable_from_graph && sa.fallback.is_none() {
                return Err(format!("step {} is unanswerable but has no fallback", sa.index));
            }
            if let Some(fb) = &sa.fallback {
                if fb.written_back_ids.len() > fb.new_triples.len() {
                    return Err(format!("step {} wrote back more triples than it extracted", sa.index));
                }
            }
            used_union.extend(sa.used_triple_ids.iter().copied());
        }
        let memory_ids = self.memory.ids();
        let memory_set: BTreeSet<_> = memory_ids.iter().copied().collect();
        if memory_set.len() != memory_ids.len() {
            return Err("graph memory repeats a triple".into());
        }
        if memory_set != used_union {
            return Err("graph memory differs from the union of used triples".into());
        }
        if self.usage.llm_calls as usize != self.calls.len() {
            return Err("usage does not match the call log".into());
        }
        if self.usage.llm_calls > self.llm_budget {
            return Err(format!("{} calls exceed the budget of {}", self.usage.llm_calls, self.llm_budget));
        }
        if self.graph_triples_after < self.graph_triples_before {
            return Err("graph shrank while solving".into());
        }
        Ok(())
    }
}
