//! End-to-end checks of the `lsb` binary: exit codes, the documented output
//! formats, and determinism of whole output trees.

use std::path::Path;
use std::process::{Command, Output};

fn lsb(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsb"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_tiny_corpus(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.jsonl");
    std::fs::write(
        &path,
        concat!(
            "{\"id\":\"a\",\"embedding\":[0.0,0.0],\"probs\":[0.25,0.25,0.25,0.25],\"label\":0,\"audio\":null,\"tags\":null}\n",
            "{\"id\":\"b\",\"embedding\":[1.0,0.0],\"probs\":[1.0,0.0,0.0,0.0],\"label\":1,\"audio\":null,\"tags\":null}\n",
            "{\"id\":\"c\",\"embedding\":[0.0,1.0],\"probs\":[0.5,0.5,0.0,0.0],\"label\":0,\"audio\":null,\"tags\":null}\n",
        ),
    )
    .unwrap();
    path
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = lsb(&[], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
}

#[test]
fn unknown_subcommand_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = lsb(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn score_matches_hand_entropy_values() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_corpus(dir.path());
    let out = lsb(&["score", "--input", "tiny.jsonl", "--strategy", "max_entropy"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    // ln 4, 0, ln 2 to the printed precision.
    assert_eq!(lines[0], "a\t1.386294");
    assert_eq!(lines[1], "b\t0.000000");
    assert_eq!(lines[2], "c\t0.693147");
}

#[test]
fn malformed_corpus_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"id\":\"a\"}\n").unwrap();
    let out = lsb(&["validate", "--input", "bad.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "{stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), "{\"corpus\": {\"labeled_count\": 50}, \"nope\": 1}")
        .unwrap();
    let out = lsb(
        &["loop", "--out-dir", "out", "--seed", "1", "--rounds", "1", "--config", "cfg.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope"), "{stderr}");
}

#[test]
fn loop_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        "{\"corpus\": {\"labeled_count\": 200, \"pool_count\": 800, \"heldout_count\": 150},\n\
         \"round\": {\"budgets\": {\"statistical\": 60, \"lsb_lt\": 15}}}",
    )
    .unwrap();
    for name in ["run1", "run2"] {
        let out = lsb(
            &["loop", "--out-dir", name, "--seed", "7", "--rounds", "2", "--config", "cfg.json"],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("run1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n.contains("lsb_lt")), "{names:?}");
    for name in &names {
        let a = std::fs::read(dir.path().join("run1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("run2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn evaluate_renders_table_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for i in 0..40 {
        let score = i as f64 / 40.0;
        let label = u8::from(i >= 18);
        lines.push_str(&format!("{{\"id\":\"s{i}\",\"score\":{score},\"label\":{label}}}\n"));
    }
    std::fs::write(dir.path().join("scored.jsonl"), lines).unwrap();
    let out = lsb(
        &["evaluate", "--input", "scored.jsonl", "--report", "report.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("R@P40") && stdout.contains("R@P90"), "{stdout}");
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed["auc"].as_f64().unwrap(), 1.0);
}

#[test]
fn fusion_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    // Corpus with audio attached, then train on the needle task and evaluate
    // the saved params against the held-out split.
    std::fs::write(
        dir.path().join("corpus.json"),
        "{\"labeled_count\": 40, \"pool_count\": 40, \"heldout_count\": 60,\n\
         \"audio\": {\"distractors\": 6, \"d_audio\": 8}}",
    )
    .unwrap();
    let out = lsb(
        &["synth", "--out-dir", "state", "--seed", "5", "--config", "corpus.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = lsb(
        &["fuse-train", "--mode", "attention", "--seed", "3", "--epochs", "8", "--out", "params.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("params.json").exists());

    // The corpus embeddings are 16-wide but the needle params expect 8; that
    // dimension mismatch must surface as a data error, not a panic.
    let out = lsb(
        &["fuse-eval", "--params", "params.json", "--input", "state/heldout.jsonl", "--mode", "attention"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // Evaluating against a matching task file works.
    let out = lsb(
        &["--json", "fuse-train", "--mode", "avg_pool", "--seed", "3", "--epochs", "4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let parsed: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(parsed["test_accuracy"].as_f64().unwrap() > 0.4);
}

#[test]
fn grad_check_reports_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lsb(&["--json", "grad-check", "--seed", "9", "--mode", "attention"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert!(parsed["max_rel_error"].as_f64().unwrap() <= 1e-5);
}

#[test]
fn threads_flag_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_corpus(dir.path());
    let base = lsb(&["score", "--input", "tiny.jsonl", "--strategy", "margin"], dir.path());
    let threaded = lsb(
        &["--threads", "2", "score", "--input", "tiny.jsonl", "--strategy", "margin"],
        dir.path(),
    );
    assert_eq!(base.stdout, threaded.stdout);
}
