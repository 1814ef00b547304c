use std::path::PathBuf;

use hopgraph_core::embedders::{FixtureEmbedder, HashingEmbedder};
use hopgraph_core::indexer::{build_graph_index, ingest_corpus, Corpus, IndexOptions, RawTriple};
use hopgraph_core::kg_store::KnowledgeGraph;
use hopgraph_core::llm::stub::{StubBackend, StubRule, StubScript};
use hopgraph_core::llm::{Gateway, TemplateName, TemplateRegistry};
use hopgraph_core::solver::*;
use hopgraph_core::stores::Stores;
use hopgraph_core::vector_index::{verbalize_triple, Embedder, VectorIndex};
use serde_json::json;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn stub_gateway(script: StubScript) -> Gateway {
    Gateway::new(TemplateRegistry::builtin(), Box::new(StubBackend::new(script)), 1)
}

fn inception_stores(emb: &FixtureEmbedder) -> Stores {
    let dir = fixtures().join("inception");
    let corpus = ingest_corpus(&dir.join("corpus.jsonl")).unwrap();
    let gw = stub_gateway(StubScript::from_file(&dir.join("stub.json")).unwrap());
    let build = build_graph_index(&corpus, &gw, emb, IndexOptions::default()).unwrap();
    Stores::from_build(build, corpus)
}

fn inception_embedder() -> FixtureEmbedder {
    FixtureEmbedder::from_file(&fixtures().join("inception/embeddings.json")).unwrap()
}

const QUESTION: &str = "Who is the spouse of the director of Inception?";

fn solve_inception() -> (QuestionTrace, Stores) {
    let emb = inception_embedder();
    let stores = inception_stores(&emb);
    let gw = stub_gateway(StubScript::from_file(&fixtures().join("inception/stub.json")).unwrap());
    let trace = solve("q1", QUESTION, &SolverConfig::default(), &stores, &gw, &emb).unwrap();
    (trace, stores)
}

#[test]
fn inception_two_hop() {
    let (trace, stores) = solve_inception();
    trace.check_invariants().unwrap();
    assert_eq!(trace.plan.sub_questions.len(), 2);
    let hop1 = &trace.sub_answers[0];
    assert!(hop1.answerable_from_graph);
    assert!(hop1.fallback.is_none());
    assert_eq!(hop1.used_triple_ids, [0]);
    let hop2 = &trace.sub_answers[1];
    assert_eq!(hop2.rewritten_question, "Who is the spouse of Christopher Nolan?");
    let fb = hop2.fallback.as_ref().unwrap();
    assert_eq!(fb.new_triples.len(), 2);
    assert_eq!(fb.written_back_ids, [4]);
    assert!(fb.reretrieved.as_ref().unwrap().iter().any(|s| s.key == 4));
    assert!(hop2.answerable_from_graph);
    assert_eq!(hop2.used_triple_ids, [4]);
    assert_eq!(trace.memory.ids(), [0, 4]);
    assert_eq!(trace.final_answer, "Emma Thomas");
    assert_eq!((trace.graph_triples_before, trace.graph_triples_after), (4, 5));
    let state = stores.read();
    assert_eq!(state.graph.lookup(4).unwrap().provenance, "dynamic:q1");
    state.check_consistency().unwrap();
    assert!(trace.degradations.is_empty(), "{:?}", trace.degradations);
}

#[test]
fn inception_trace_is_stable() {
    let a = solve_inception().0.to_json();
    let b = solve_inception().0.to_json();
    assert_eq!(a, b);
    QuestionTrace::from_json_validated(&a).unwrap();
}

#[test]
fn retrieval_boundaries() {
    let emb = inception_embedder();
    let stores = inception_stores(&emb);
    let state = stores.read();
    let hits = retrieve_for_subquestion("Who directed Inception?", &state.triples, 1, &emb).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].key, 0);
    let all = retrieve_for_subquestion("Who directed Inception?", &state.triples, 5, &emb).unwrap();
    assert_eq!(all.len(), 4);
    assert_eq!(all, retrieve_for_subquestion("Who directed Inception?", &state.triples, 5, &emb).unwrap());
    let empty = VectorIndex::new();
    assert!(retrieve_for_subquestion("x", &empty, 5, &HashingEmbedder::new(8)).unwrap().is_empty());
}

fn candidates(graph: &KnowledgeGraph) -> Vec<(hopgraph_core::kg_store::Triple, f64)> {
    graph.triples().iter().map(|t| (t.clone(), 0.5)).collect()
}

#[test]
fn answer_from_triples_evidence_rules() {
    let mut graph = KnowledgeGraph::new();
    for (h, r, t) in [("a", "b", "c"), ("d", "e", "f"), ("g", "h", "i"), ("Inception", "directed by", "Christopher Nolan")] {
        graph.insert_triple(h, r, t, "doc:x", 0).unwrap();
    }
    let gw = stub_gateway(StubScript::new(vec![
        StubRule::new(
            TemplateName::AnswerFromTriples,
            [json!({"answerable": true, "answer": "Christopher Nolan", "used_triple_ids": [3]})],
        )
        .when("question", "directed"),
        StubRule::new(
            TemplateName::AnswerFromTriples,
            [json!({"answerable": true, "answer": "X", "used_triple_ids": [99]})],
        ),
    ]));
    let s = gw.session(None);
    let got = answer_from_triples("Who directed Inception?", &candidates(&graph), &s).unwrap();
    assert_eq!(
        got,
        AnswerAttempt {
            answerable: true,
            answer: "Christopher Nolan".into(),
            used_triple_ids: vec![3]
        }
    );
    let got = answer_from_triples("Who else?", &candidates(&graph), &s).unwrap();
    assert!(!got.answerable);
    assert!(got.used_triple_ids.is_empty());
    assert_eq!(s.calls_made(), 2);
    let got = answer_from_triples("anything", &[], &s).unwrap();
    assert!(!got.answerable);
    assert_eq!(s.calls_made(), 2);
}

#[test]
fn write_back_counts_only_new_triples() {
    let emb = HashingEmbedder::new(32);
    let mut graph = KnowledgeGraph::new();
    let mut triples = VectorIndex::new();
    let (id, _) = graph.insert_triple("A", "r", "B", "doc:d", 0).unwrap();
    triples.upsert(id, &verbalize_triple(graph.lookup(id).unwrap()), &emb).unwrap();
    let stores = Stores::new(graph, triples, VectorIndex::new(), Corpus::new());
    let event = FallbackEvent {
        new_triples: vec![RawTriple::new("a", "R", " b "), RawTriple::new("C", "s", "D")],
        ..Default::default()
    };
    let event = update_graph_with_new_triples(&stores, event, "q7", 2, &emb).unwrap();
    assert_eq!(event.written_back_ids, [1]);
    let state = stores.read();
    assert_eq!(state.graph.len(), 2);
    let t = state.graph.lookup(1).unwrap();
    assert_eq!((t.provenance.as_str(), t.created_at_step), ("dynamic:q7", 2));
    state.check_consistency().unwrap();
    let hits = state.triples.top_k("C s D", 1, &emb).unwrap();
    assert_eq!(hits[0].key, 1);
    drop(state);
    let noop = update_graph_with_new_triples(&stores, FallbackEvent::default(), "q8", 1, &emb).unwrap();
    assert!(noop.written_back_ids.is_empty());
}

#[test]
fn fallback_over_empty_corpus_degrades() {
    let gw = stub_gateway(StubScript::default());
    let s = gw.session(None);
    let emb = HashingEmbedder::new(8);
    let (answer, event) = fallback_answer_from_docs("q?", &VectorIndex::new(), &Corpus::new(), &s, &emb, 5, 8000).unwrap();
    assert_eq!(answer, UNKNOWN);
    assert!(event.retrieved_doc_ids.is_empty() && event.new_triples.is_empty());
    assert_eq!(s.degradations().len(), 1);
    assert_eq!(s.calls_made(), 0);
}

fn step(index: usize, used: Vec<u64>) -> SubAnswer {
    SubAnswer {
        index,
        sub_question: format!("q{index}"),
        rewritten_question: format!("q{index}"),
        retrieved: vec![],
        answer: String::new(),
        answerable_from_graph: true,
        used_triple_ids: used,
        fallback: None,
    }
}

#[test]
fn memory_keeps_earliest_step() {
    let mut graph = KnowledgeGraph::new();
    for i in 0..8 {
        graph.insert_triple(&format!("h{i}"), "r", "t", "doc:x", 0).unwrap();
    }
    let memory = assemble_graph_memory(&[step(1, vec![3]), step(2, vec![3, 7])], &graph).unwrap();
    assert_eq!(memory.ids(), [3, 7]);
    assert_eq!(memory.entries[0].step, 1);
    assert_eq!(memory.entries[1].step, 2);
    assert!(assemble_graph_memory(&[step(1, vec![]), step(2, vec![])], &graph).unwrap().is_empty());
    assert!(assemble_graph_memory(&[step(1, vec![42])], &graph).is_err());
}

#[test]
fn final_answer_with_empty_memory_still_asks() {
    let gw = stub_gateway(StubScript::new(vec![StubRule::new(TemplateName::FinalAnswer, [json!("UNKNOWN")])
        .when("memory", NO_EVIDENCE)]));
    let s = gw.session(None);
    assert_eq!(generate_final_answer("q?", &GraphMemory::default(), &s).unwrap(), "UNKNOWN");
    assert_eq!(s.calls_made(), 1);
    let failing = stub_gateway(StubScript::default());
    let s = failing.session(None);
    assert_eq!(generate_final_answer("q?", &GraphMemory::default(), &s).unwrap(), UNKNOWN);
}

#[test]
fn budget_exhaustion_returns_partial_trace() {
    let emb = inception_embedder();
    let stores = inception_stores(&emb);
    let gw = stub_gateway(StubScript::from_file(&fixtures().join("inception/stub.json")).unwrap());
    let config = SolverConfig {
        llm_budget: 3,
        ..SolverConfig::default()
    };
    let err = solve("q1", QUESTION, &config, &stores, &gw, &emb).unwrap_err();
    assert!(matches!(err, SolveError::BudgetExceeded { budget: 3, .. }));
    let partial = err.into_partial();
    assert_eq!(partial.final_answer, UNKNOWN);
    assert_eq!(partial.abort.as_ref().unwrap().kind, AbortKind::BudgetExceeded);
    assert_eq!(partial.usage.llm_calls, 3);
    QuestionTrace::from_json_validated(&partial.to_json()).unwrap();
}

#[test]
fn single_step_plan_without_decomposition() {
    let emb = HashingEmbedder::new(64);
    let mut graph = KnowledgeGraph::new();
    let mut triples = VectorIndex::new();
    let (id, _) = graph.insert_triple("Inception", "directed by", "Christopher Nolan", "doc:d1", 0).unwrap();
    triples.upsert(id, &verbalize_triple(graph.lookup(id).unwrap()), &emb).unwrap();
    let stores = Stores::new(graph, triples, VectorIndex::new(), Corpus::new());
    let gw = stub_gateway(StubScript::new(vec![
        StubRule::new(
            TemplateName::AnswerFromTriples,
            [json!({"answerable": true, "answer": "Christopher Nolan", "used_triple_ids": [0]})],
        ),
        StubRule::new(TemplateName::FinalAnswer, [json!("Christopher Nolan")]),
    ]));
    let config = SolverConfig {
        decompose: false,
        ..SolverConfig::default()
    };
    let trace = solve("q2", "Who directed Inception?", &config, &stores, &gw, &emb).unwrap();
    assert_eq!(trace.sub_answers.len(), 1);
    assert!(trace.sub_answers[0].fallback.is_none());
    assert_eq!(trace.memory.ids(), [0]);
    assert_eq!(trace.final_answer, "Christopher Nolan");
    assert_eq!(emb.name(), "hashing-v1");
}
