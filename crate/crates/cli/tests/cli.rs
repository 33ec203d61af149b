use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn llmscreen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llmscreen"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, backend_kind: &str) {
    fs::write(
        dir.join("exp.toml"),
        format!(
            "seed = 3\noutput_dir = \"out\"\n[data]\ndir = \"data\"\n\
             [[backends]]\nname = \"a\"\nkind = \"{backend_kind}\"\nendpoint = \"http://127.0.0.1:9\"\nmodel = \"m\"\n\
             [[backends]]\nname = \"b\"\nkind = \"synthetic\"\ntemplate = \"alpaca\"\n\
             [[ensembles]]\nid = \"ab\"\nmethod_ids = [\"a\", \"b\"]\n\
             [calibration]\ntarget_recall = 0.95\n"
        ),
    )
    .unwrap();
}

#[test]
fn synthetic_ingest_then_full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ingest = llmscreen(
        d,
        &[
            "ingest",
            "--synthetic",
            "--n-topics",
            "5",
            "--docs-per-topic",
            "40",
            "--out",
            "data",
            "--seed",
            "1",
        ],
    );
    assert!(ingest.status.success(), "{}", String::from_utf8_lossy(&ingest.stderr));
    assert!(d.join("data/topics.jsonl").exists());
    write_config(d, "synthetic");

    let loo = llmscreen(d, &["--config", "exp.toml", "loo"]);
    assert!(loo.status.success(), "{}", String::from_utf8_lossy(&loo.stderr));
    let stdout = String::from_utf8_lossy(&loo.stdout);
    assert!(stdout.contains("calibrated (macro average)"), "{stdout}");
    for f in [
        "decisions.jsonl",
        "thresholds.json",
        "manifest.json",
        "report.csv",
        "report.txt",
        "significance.json",
    ] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }

    // `report` reads the decisions and writes nothing; `evaluate` rewrites
    // the same report bytes.
    let before = fs::read(d.join("out/report.csv")).unwrap();
    let report = llmscreen(d, &["--config", "exp.toml", "report", "--format", "csv"]);
    assert!(report.status.success());
    assert_eq!(report.stdout, before);
    let eval = llmscreen(d, &["--config", "exp.toml", "evaluate"]);
    assert!(eval.status.success());
    assert_eq!(fs::read(d.join("out/report.csv")).unwrap(), before);

    // A finished run's manifest is itself a config.
    let rerun = llmscreen(d, &["--config", "out/manifest.json", "--offline", "screen"]);
    assert!(rerun.status.success(), "{}", String::from_utf8_lossy(&rerun.stderr));
}

#[test]
fn stages_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(llmscreen(
        d,
        &[
            "ingest",
            "--synthetic",
            "--n-topics",
            "3",
            "--docs-per-topic",
            "20",
            "--out",
            "data"
        ]
    )
    .status
    .success());
    write_config(d, "synthetic");
    assert!(llmscreen(d, &["--config", "exp.toml", "score"]).status.success());
    assert!(d.join("out/scores.jsonl").exists());
    assert!(!d.join("out/decisions.jsonl").exists());
    assert!(llmscreen(d, &["--config", "exp.toml", "calibrate"]).status.success());
    assert!(d.join("out/thresholds.json").exists());
    assert!(llmscreen(d, &["--config", "exp.toml", "--offline", "ensemble"])
        .status
        .success());
    let decisions = fs::read_to_string(d.join("out/decisions.jsonl")).unwrap();
    assert!(decisions.lines().all(|l| l.contains("\"ab\"")), "{decisions}");
}

#[test]
fn raw_ingest_with_clef_topics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir(d.join("topics")).unwrap();
    fs::write(d.join("topics/CD1"), "Topic: CD1\n\nTitle: First review\n\nQuery:\nx\n").unwrap();
    fs::write(d.join("topics/CD2"), "Topic: CD2\nTitle: Second review\n").unwrap();
    fs::write(
        d.join("cands.jsonl"),
        "{\"topic_id\":\"CD1\",\"doc_id\":\"1\",\"title\":\"A\"}\n{\"topic_id\":\"CD2\",\"doc_id\":\"2\",\"title\":\"B\"}\n",
    )
    .unwrap();
    fs::write(d.join("qrels"), "CD1 0 1 1\nCD2 0 2 0\n").unwrap();
    let out = llmscreen(
        d,
        &[
            "ingest",
            "--clef-topics",
            "topics",
            "--candidates",
            "cands.jsonl",
            "--qrels",
            "qrels",
            "--out",
            "data",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // CD2 has no included document and is removed.
    assert_eq!(
        fs::read_to_string(d.join("data/topics.jsonl")).unwrap().lines().count(),
        1
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("CD2"));
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| llmscreen(d, args).status.code();

    // Config: missing flag, unreadable file.
    assert_eq!(code(&["screen"]), Some(2));
    assert_eq!(code(&["--config", "missing.toml", "screen"]), Some(2));
    // Data: the configured dataset does not exist.
    write_config(d, "synthetic");
    assert_eq!(code(&["--config", "exp.toml", "screen"]), Some(3));
    // Scoring: offline with an empty cache for a remote backend.
    assert!(llmscreen(
        d,
        &[
            "ingest",
            "--synthetic",
            "--n-topics",
            "2",
            "--docs-per-topic",
            "10",
            "--out",
            "data"
        ]
    )
    .status
    .success());
    write_config(d, "openai");
    assert_eq!(code(&["--config", "exp.toml", "--offline", "screen"]), Some(4));
    let manifest = fs::read_to_string(d.join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""));
}
