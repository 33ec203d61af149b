use llmscreen::corpus::{Candidate, Topic};
use llmscreen::prompting::{PromptTemplate, DEFAULT_BUDGET};
use llmscreen::scoring::{RetryPolicy, ScoreCache, Scorer, ScoringError, SyntheticBackend, SyntheticGenerator};

fn topic() -> Topic {
    Topic {
        topic_id: "CD0001".into(),
        title: "Screening accuracy of a test".into(),
    }
}

fn candidates(n: usize) -> Vec<Candidate> {
    (0..n)
        .map(|i| Candidate {
            doc_id: format!("doc{i:03}"),
            title: format!("Title {i}"),
            abstract_text: format!("Abstract {i}"),
        })
        .collect()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        retries: 3,
        backoff_ms: 1,
    }
}

#[test]
fn output_follows_input_order_under_jitter() {
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5)).with_jitter(4);
    let cache = ScoreCache::in_memory();
    let scorer = Scorer::new(&backend, &cache).with_max_in_flight(8);
    let cands = candidates(100);
    let out = scorer
        .score_topic(&topic(), &cands, &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap();
    let ids: Vec<&str> = out.records.iter().map(|r| r.doc_id.as_str()).collect();
    let expected: Vec<&str> = cands.iter().map(|c| c.doc_id.as_str()).collect();
    assert_eq!(ids, expected);
    assert!(out.failures.is_empty());
    assert_eq!(backend.calls(), 100);
}

#[test]
fn one_transient_failure_is_retried() {
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5)).with_transient_failures(["doc042"], 1);
    let cache = ScoreCache::in_memory();
    let scorer = Scorer::new(&backend, &cache)
        .with_retry(fast_retry())
        .with_max_in_flight(4);
    let out = scorer
        .score_topic(&topic(), &candidates(100), &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap();
    assert_eq!(out.records.len(), 100);
    assert_eq!(out.retries, 1);
    assert_eq!(backend.calls(), 101);
}

#[test]
fn too_many_hard_failures_fail_the_topic() {
    let bad = ["doc003", "doc017", "doc050", "doc071", "doc099"];
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5)).with_hard_failures(bad);
    let cache = ScoreCache::in_memory();
    let scorer = Scorer::new(&backend, &cache)
        .with_retry(fast_retry())
        .with_failure_tolerance(0.01)
        .with_max_in_flight(4);
    let err = scorer
        .score_topic(&topic(), &candidates(100), &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap_err();
    match err {
        ScoringError::TopicFailed { total, failed, .. } => {
            assert_eq!(total, 100);
            assert_eq!(failed, bad);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn failures_within_tolerance_return_partial_results() {
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5)).with_hard_failures(["doc010"]);
    let cache = ScoreCache::in_memory();
    let scorer = Scorer::new(&backend, &cache).with_retry(fast_retry());
    let out = scorer
        .score_topic(&topic(), &candidates(100), &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap();
    assert_eq!(out.records.len(), 99);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].0, "doc010");
    assert_eq!(out.retries, 3);
}

#[test]
fn second_pass_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.jsonl");
    let cands = candidates(30);
    let first = {
        let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5));
        let cache = ScoreCache::open(&path).unwrap();
        Scorer::new(&backend, &cache)
            .score_topic(&topic(), &cands, &PromptTemplate::generic(), DEFAULT_BUDGET)
            .unwrap()
    };
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5));
    let cache = ScoreCache::open(&path).unwrap();
    let second = Scorer::new(&backend, &cache)
        .offline(true)
        .score_topic(&topic(), &cands, &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap();
    assert_eq!(backend.calls(), 0);
    assert_eq!(second.cache_hits, 30);
    assert_eq!(first.records, second.records);
    for (a, b) in first.records.iter().zip(&second.records) {
        assert_eq!(a.p_yes.to_bits(), b.p_yes.to_bits());
        assert_eq!(a.p_no.to_bits(), b.p_no.to_bits());
    }
}

#[test]
fn offline_cache_miss_is_an_error() {
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5));
    let cache = ScoreCache::in_memory();
    let scorer = Scorer::new(&backend, &cache).offline(true).with_failure_tolerance(0.0);
    let err = scorer
        .score_topic(&topic(), &candidates(3), &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap_err();
    assert!(matches!(err, ScoringError::TopicFailed { .. }));
    assert_eq!(backend.calls(), 0);
}

#[test]
fn missing_answer_tokens_give_indeterminate_records() {
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5)).with_no_answer(["doc001"]);
    let cache = ScoreCache::in_memory();
    let out = Scorer::new(&backend, &cache)
        .score_topic(&topic(), &candidates(3), &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap();
    assert_eq!(out.indeterminate, 1);
    let r = &out.records[1];
    assert!(r.indeterminate);
    assert_eq!((r.p_yes, r.p_no), (0.0, 0.0));
    assert!(!out.records[0].indeterminate);
}

#[test]
fn prompt_hash_identifies_prompt_text() {
    let backend = SyntheticBackend::new(SyntheticGenerator::new("m", 5));
    let cache = ScoreCache::in_memory();
    let cands = candidates(2);
    let generic = Scorer::new(&backend, &cache)
        .score_topic(&topic(), &cands, &PromptTemplate::generic(), DEFAULT_BUDGET)
        .unwrap();
    let alpaca = Scorer::new(&backend, &cache)
        .score_topic(&topic(), &cands, &PromptTemplate::alpaca(), DEFAULT_BUDGET)
        .unwrap();
    assert_ne!(generic.records[0].prompt_hash, alpaca.records[0].prompt_hash);
    assert_eq!(alpaca.cache_hits, 0);
    assert_eq!(cache.len(), 4);
}
