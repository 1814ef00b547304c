//! Sub-question driven graph retrieval for multi-hop question answering.
//!
//! The pipeline has four stages:
//!
//! 1. [`indexer`] extracts `(head, relation, tail)` triples from a corpus with
//!    an LLM and stores them, deduplicated, in a [`kg_store::KnowledgeGraph`].
//! 2. [`decomposer`] splits a question into an ordered chain of sub-questions
//!    and rewrites each one with the answers found so far.
//! 3. [`solver`] retrieves the top-k triples for every sub-question. When the
//!    graph cannot answer, it falls back to whole documents, extracts new
//!    triples from them and writes those back into the graph.
//! 4. The triples actually used along the way form the graph memory from
//!    which the final answer is generated.
//!
//! [`eval`] scores runs with exact match and token F1.

pub mod decomposer;
pub mod embedders;
pub mod eval;
pub mod indexer;
pub mod kg_store;
pub mod llm;
pub mod solver;
pub mod stores;
pub mod vector_index;
