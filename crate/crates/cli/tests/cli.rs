use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn needed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_needed"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn needed")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const SMALL_RUN: &str = r#"{
    "corpus": "corpus.jsonl",
    "disease_names": ["cataract", "glaucoma", "diabetic_retinopathy", "conjunctivitis", "keratitis", "macular_degeneration"],
    "train": {"max_epochs": 2, "batch_size": 16, "model": {"d_model": 16, "word_layers": 1, "n_heads": 2}}
}"#;

fn small_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("gen.json"),
        r#"{"generator": {"n_docs": 120, "seed": 4}}"#,
    )
    .unwrap();
    let out = needed(
        dir.path(),
        &["generate", "--config", "gen.json", "--out", "corpus.jsonl"],
    );
    assert_eq!(stdout_json(&out)["documents"], 120);
    fs::write(dir.path().join("run.json"), SMALL_RUN).unwrap();
    dir
}

fn epoch_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .filter(|l| l.starts_with("epoch "))
        .map(str::to_owned)
        .collect()
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let dir = small_workspace();
    let a = needed(
        dir.path(),
        &["train", "--config", "run.json", "--seed", "3", "--out", "a"],
    );
    let b = needed(
        dir.path(),
        &["train", "--config", "run.json", "--seed", "3", "--out", "b"],
    );
    let (ja, jb) = (stdout_json(&a), stdout_json(&b));
    assert_eq!(epoch_lines(&a).len(), 2);
    assert_eq!(epoch_lines(&a), epoch_lines(&b));
    assert_eq!(ja["train_loss"], jb["train_loss"]);
    assert_eq!(
        fs::read(dir.path().join("a/params.bin")).unwrap(),
        fs::read(dir.path().join("b/params.bin")).unwrap()
    );

    let eval = stdout_json(&needed(dir.path(), &["evaluate", "--checkpoint", "a"]));
    assert_eq!(eval["macro_auc"], ja["test"]["macro_auc"]);
    assert_eq!(eval["per_label"][1]["name"], "glaucoma");
}

#[test]
fn ablate_one_variant_prints_a_report() {
    let dir = small_workspace();
    let report = stdout_json(&needed(
        dir.path(),
        &["ablate", "--config", "run.json", "--variant", "wo_s"],
    ));
    assert_eq!(report["variant"], "wo_s");
    for key in ["macro_f1", "micro_f1", "macro_auc", "micro_auc"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

#[test]
fn explain_writes_normalized_columns() {
    let dir = small_workspace();
    stdout_json(&needed(
        dir.path(),
        &["train", "--config", "run.json", "--out", "ck"],
    ));
    let out = needed(
        dir.path(),
        &[
            "explain",
            "--checkpoint",
            "ck",
            "--doc-id",
            "7",
            "--eye",
            "R",
        ],
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "sentence");
    assert_eq!(header.len(), 7);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for col in 1..header.len() {
        let sum: f64 = rows.iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
        assert!(
            (sum - 1.0).abs() < 1e-5,
            "column {} sums to {sum}",
            &header[col]
        );
    }

    let file = needed(
        dir.path(),
        &[
            "explain",
            "--checkpoint",
            "ck",
            "--doc-id",
            "7",
            "--eye",
            "R",
            "--out",
            "att.csv",
        ],
    );
    assert!(file.status.success());
    assert_eq!(fs::read(dir.path().join("att.csv")).unwrap(), out.stdout);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = stdout_json(&needed(dir.path(), &["gradcheck", "--seed", "1"]));
    assert_eq!(report["passed"], true);
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        needed(dir.path(), &["train", "--bogus"]).status.code(),
        Some(1)
    );
    assert_eq!(needed(dir.path(), &["ablate"]).status.code(), Some(1));
    assert_eq!(needed(dir.path(), &["--help"]).status.code(), Some(0));

    fs::write(
        dir.path().join("bad.json"),
        r#"{"train": {"learning_rate": "fast"}}"#,
    )
    .unwrap();
    let out = needed(
        dir.path(),
        &["train", "--config", "bad.json", "--out", "ck"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let missing = needed(dir.path(), &["evaluate", "--checkpoint", "nowhere"]);
    assert_eq!(missing.status.code(), Some(2));
}
