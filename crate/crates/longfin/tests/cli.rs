//! Black-box checks of the `longfin` binary: argument handling, error
//! paths, and the prediction-file scoring flow.

use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::OnceLock;

use longfin::config::ModelConfig;
use longfin::doc::write_jsonl;
use longfin::encode::LABEL_COUNT;
use longfin::synth::{echo_corpus, ner_corpus};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_longfin"));
    c.env("LONGFIN_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 300,
        max_len: 64,
        d_text: 16,
        d_layout: 8,
        layers: 1,
        heads: 2,
        window: 8,
        global_interval: 16,
        detach_biacm: false,
        coord_emb_dim: 2,
        ffn_multiplier: 2,
        dropout_rate: 0.1,
        label_count: LABEL_COUNT,
    }
}

/// A workspace with a toy corpus and a 2-step checkpoint, built once and
/// shared by the tests that need a trained model directory.
fn fixture() -> &'static (tempfile::TempDir, PathBuf) {
    static FIX: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        toy_cfg().save(&dir.path().join("toy.cfg")).unwrap();
        write_jsonl(&dir.path().join("pre.jsonl"), &echo_corpus(4, 16)).unwrap();
        write_jsonl(&dir.path().join("ner.jsonl"), &ner_corpus(4, 16)).unwrap();
        let ckpt = dir.path().join("ckpt");
        let out = bin()
            .args(["pretrain", "--steps", "2", "--warmup", "0", "--batch", "1", "--seed", "1"])
            .arg("--config")
            .arg(dir.path().join("toy.cfg"))
            .arg("--data")
            .arg(dir.path().join("pre.jsonl"))
            .arg("--out")
            .arg(&ckpt)
            .output()
            .unwrap();
        assert!(out.status.success(), "fixture pretrain failed: {}", String::from_utf8_lossy(&out.stderr));
        (dir, ckpt)
    })
}

fn fixture_path(name: &str) -> PathBuf {
    fixture().0.path().join(name)
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["pretrain", "finetune", "evaluate", "stats", "inspect-pattern", "gradcheck"] {
        assert!(text.contains(sub), "--help does not mention {}", sub);
    }
}

#[test]
fn unknown_flag_is_rejected() {
    let out = run(&["stats", "--bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("--bogus"), "stderr should name the bad flag: {}", err);
}

#[test]
fn missing_data_file_fails_cleanly() {
    let out = run(&["stats", "--data", "/nonexistent/nowhere.jsonl"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error:"), "stderr: {}", err);
    assert!(err.contains("nowhere.jsonl"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    let mut cfg = toy_cfg();
    cfg.d_text = 10;
    cfg.heads = 3;
    std::fs::write(&cfg_path, cfg.render()).unwrap();
    write_jsonl(&dir.path().join("pre.jsonl"), &echo_corpus(2, 8)).unwrap();
    let out = bin()
        .args(["pretrain", "--steps", "1", "--warmup", "0"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(dir.path().join("pre.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("divisible"), "stderr: {}", err);
}

#[test]
fn evaluate_pred_file_against_itself_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let docs = ner_corpus(3, 16);
    let data = dir.path().join("gold.jsonl");
    write_jsonl(&data, &docs).unwrap();

    // Predictions identical to the gold annotations.
    let pred_path = dir.path().join("pred.jsonl");
    let lines: Vec<String> = docs
        .iter()
        .map(|d| {
            serde_json::json!({ "id": d.id, "entities": d.entities }).to_string()
        })
        .collect();
    std::fs::write(&pred_path, lines.join("\n") + "\n").unwrap();

    let out_dir = dir.path().join("ev");
    let out = bin()
        .args(["evaluate"])
        .arg("--data")
        .arg(&data)
        .arg("--pred")
        .arg(&pred_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["micro"]["f1"], 1.0);
    assert_eq!(report["micro"]["fp"], 0);
    assert_eq!(report["documents"], 3);
}

#[test]
fn evaluate_rejects_duplicate_prediction_ids() {
    let dir = tempfile::tempdir().unwrap();
    let docs = ner_corpus(2, 16);
    let data = dir.path().join("gold.jsonl");
    write_jsonl(&data, &docs).unwrap();
    let pred_path = dir.path().join("pred.jsonl");
    let line = serde_json::json!({ "id": docs[0].id, "entities": [] }).to_string();
    std::fs::write(&pred_path, format!("{}\n{}\n", line, line)).unwrap();

    let out = bin()
        .args(["evaluate"])
        .arg("--data")
        .arg(&data)
        .arg("--pred")
        .arg(&pred_path)
        .arg("--out")
        .arg(dir.path().join("ev"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("duplicate"), "stderr: {}", err);
}

#[test]
fn evaluate_chunk_length_must_fit_the_model() {
    let (_, ckpt) = fixture();
    let out = bin()
        .args(["evaluate", "--mode", "chunked", "--max-len", "128"])
        .arg("--checkpoint")
        .arg(ckpt)
        .arg("--data")
        .arg(fixture_path("ner.jsonl"))
        .arg("--out")
        .arg(fixture_path("ev-bad"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("max_len"), "stderr: {}", err);
}

#[test]
fn finetune_then_evaluate_writes_all_artifacts() {
    let (_, ckpt) = fixture();
    let ft = fixture_path("ft");
    let out = bin()
        .args(["finetune", "--steps", "2", "--batch", "1", "--seed", "2"])
        .arg("--checkpoint")
        .arg(ckpt)
        .arg("--data")
        .arg(fixture_path("ner.jsonl"))
        .arg("--out")
        .arg(&ft)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.lfck", "vocab.txt", "config.cfg", "loss.csv", "run.cfg"] {
        assert!(ft.join(f).exists(), "missing {}", f);
    }

    let ev = fixture_path("ev");
    let out = bin()
        .args(["evaluate"])
        .arg("--checkpoint")
        .arg(&ft)
        .arg("--data")
        .arg(fixture_path("ner.jsonl"))
        .arg("--out")
        .arg(&ev)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "report.txt", "predictions.jsonl", "run.cfg"] {
        assert!(ev.join(f).exists(), "missing {}", f);
    }
    // The printed table matches the persisted one.
    let stdout = String::from_utf8(out.stdout).unwrap();
    let persisted = std::fs::read_to_string(ev.join("report.txt")).unwrap();
    assert!(stdout.contains(persisted.lines().next().unwrap()));
}

#[test]
fn inspect_pattern_prints_runs_and_pbm() {
    let out = run(&["inspect-pattern", "--n", "8", "--window", "4", "--interval", "100"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("4: 0 2-6"), "runs output:\n{}", text);

    let out = run(&["inspect-pattern", "--n", "8", "--window", "4", "--interval", "100", "--format", "pbm"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("P1\n8 8\n"), "pbm output:\n{}", text);
}

#[test]
fn inspect_pattern_writes_file_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pattern.pbm");
    let out = bin()
        .args(["inspect-pattern", "--n", "16", "--window", "4", "--interval", "8", "--format", "pbm"])
        .arg("--out")
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("P1\n16 16\n"));
}

#[test]
fn stats_prints_per_split_rows_and_overall() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(&dir.path().join("train.jsonl"), &ner_corpus(3, 16)).unwrap();
    write_jsonl(&dir.path().join("test.jsonl"), &ner_corpus(2, 16)).unwrap();
    let out = bin()
        .args(["stats"])
        .arg("--data")
        .arg(dir.path().join("train.jsonl"))
        .arg("--data")
        .arg(dir.path().join("test.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[0], ["split", "forms", "pages", "words", "entities"]);
    assert_eq!(rows[1], ["train", "3", "3", "48", "6"]);
    assert_eq!(rows[2], ["test", "2", "2", "32", "4"]);
    assert_eq!(rows[3], ["Overall", "5", "5", "80", "10"]);
}

#[test]
fn gradcheck_subcommand_passes_in_f64() {
    let out = run(&["gradcheck", "--precision", "f64", "--n", "8", "--loss", "ner", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max_rel_err"), "stdout: {}", text);
}
