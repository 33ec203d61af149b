use std::fs;

use llmscreen::corpus::{
    assemble_dataset, load_candidates, load_topics, parse_qrels, read_clef_topic, synthetic_dataset, Dataset, Label,
    SyntheticCorpus, CANDIDATES_FILE, QRELS_FILE, SEEDS_FILE, TOPICS_FILE,
};

#[test]
fn canonical_round_trip() {
    let ds = synthetic_dataset(&SyntheticCorpus {
        topics: 4,
        docs_per_topic: 25,
        seeds_per_topic: 1,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_canonical(dir.path()).unwrap();
    for f in [TOPICS_FILE, CANDIDATES_FILE, QRELS_FILE, SEEDS_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (back, report) = Dataset::load_canonical(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert!(report.removed_no_included.is_empty());
    assert_eq!(report.dropped_labels, 0);

    // Writing the reloaded dataset again gives the same bytes.
    let dir2 = tempfile::tempdir().unwrap();
    back.write_canonical(dir2.path()).unwrap();
    for f in [TOPICS_FILE, CANDIDATES_FILE, QRELS_FILE, SEEDS_FILE] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(dir2.path().join(f)).unwrap()
        );
    }
}

#[test]
fn raw_files_assemble_with_cleanup() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    fs::write(
        p("topics.jsonl"),
        "{\"topic_id\":\"CD1\",\"title\":\"Review one\"}\n{\"topic_id\":\"CD2\",\"title\":\"Review two\"}\n",
    )
    .unwrap();
    fs::write(
        p("candidates.jsonl"),
        concat!(
            "{\"topic_id\":\"CD1\",\"doc_id\":\"1\",\"title\":\"A\",\"abstract\":\"x\"}\n",
            "{\"topic_id\":\"CD1\",\"doc_id\":\"2\",\"title\":\"B\"}\n",
            "{\"topic_id\":\"CD2\",\"doc_id\":\"3\",\"title\":\"C\"}\n",
        ),
    )
    .unwrap();
    fs::write(
        p("qrels.txt"),
        "# topic iter doc label\nCD1 0 1 1\nCD1 0 2 0\nCD1 0 99 1\nCD2 0 3 0\n",
    )
    .unwrap();
    let (ds, report) = assemble_dataset(
        load_topics(p("topics.jsonl")).unwrap(),
        load_candidates(p("candidates.jsonl")).unwrap(),
        parse_qrels(p("qrels.txt")).unwrap(),
        None,
    )
    .unwrap();
    assert_eq!(ds.topics().len(), 1);
    assert_eq!(report.removed_no_included, ["CD2"]);
    assert_eq!(report.dropped_labels, 1);
    assert_eq!(ds.label("CD1", "1"), Some(Label::Included));
    assert_eq!(ds.candidates("CD1")[0].abstract_text, "x");
}

#[test]
fn clef_topic_header() {
    let t = read_clef_topic("Topic: CD008643\n\nTitle: Rapid diagnostic tests for a disease\n\nQuery:\n...\n").unwrap();
    assert_eq!(t.topic_id, "CD008643");
    assert_eq!(t.title, "Rapid diagnostic tests for a disease");
    assert!(read_clef_topic("Query: only").is_err());
}
