//! Exercises the compiled binary end to end: exit codes, override flags,
//! and the artifact layout the commands leave behind.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_vrag");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary launches")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("process exits normally")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).expect("config writes");
    path.to_string_lossy().into_owned()
}

/// Small corpus and a short run; enough to cover every command without
/// meaningful training time.
fn smoke_config_with_epochs(root: &Path, epochs: usize) -> String {
    write_config(
        root,
        "smoke.json",
        &format!(
            r#"{{
  "data_dir": "{root}/data",
  "out_dir": "{root}/runs",
  "synthetic": {{
    "num_documents": 20,
    "vocab_size": 400,
    "train_instances": 60,
    "val_instances": 20,
    "test_instances": 20,
    "seed": 4
  }},
  "train": {{ "k": 2, "max_epochs": {epochs}, "patience": {epochs} }},
  "decode": {{ "beam_width": 2, "max_len": 12, "k": 2 }},
  "seeds": [0]
}}"#,
            root = root.display()
        ),
    )
}

fn smoke_config(root: &Path) -> String {
    smoke_config_with_epochs(root, 2)
}

#[test]
fn generate_data_is_deterministic() {
    let tmp = TempDir::new().expect("tempdir");
    let mut docs = Vec::new();
    for sub in ["a", "b"] {
        let root = tmp.path().join(sub);
        std::fs::create_dir(&root).expect("subdir");
        let cfg = smoke_config(&root);
        let out = run(&["--config", &cfg, "generate-data"]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        docs.push(std::fs::read(root.join("data/documents.jsonl")).expect("documents written"));
    }
    assert_eq!(docs[0], docs[1], "same spec must serialize byte-identically");
    assert!(!docs[0].is_empty());
}

#[test]
fn unknown_config_keys_are_a_config_error() {
    let tmp = TempDir::new().expect("tempdir");
    let cfg = write_config(tmp.path(), "typo.json", r#"{ "lurning_rate": 0.1 }"#);
    let out = run(&["--config", &cfg, "generate-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn invalid_config_values_are_a_config_error() {
    let tmp = TempDir::new().expect("tempdir");
    let cfg = write_config(tmp.path(), "zerok.json", r#"{ "train": { "k": 0 } }"#);
    let out = run(&["--config", &cfg, "train"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn training_without_data_is_a_data_error() {
    let tmp = TempDir::new().expect("tempdir");
    let cfg = write_config(
        tmp.path(),
        "nodata.json",
        &format!(
            r#"{{ "data_dir": "{0}/missing", "out_dir": "{0}/runs" }}"#,
            tmp.path().display()
        ),
    );
    let out = run(&["--config", &cfg, "train"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn forced_truncation_threshold_fails_the_kl_study() {
    let tmp = TempDir::new().expect("tempdir");
    let cfg = write_config(
        tmp.path(),
        "klcheck.json",
        &format!(
            r#"{{
  "data_dir": "{0}/data",
  "out_dir": "{0}/runs",
  "klcheck": {{ "trials": 50, "support_sizes": [10], "epsilons": [0.01] }}
}}"#,
            tmp.path().display()
        ),
    );

    let honest = run(&["--config", &cfg, "study", "klcheck"]);
    assert_eq!(code(&honest), 0, "stderr: {}", stderr(&honest));

    // Discarding half the mass instead of the derived threshold must blow
    // past epsilon and surface as a failed-check exit.
    let forced = run(&["--config", &cfg, "study", "klcheck", "--delta", "0.5"]);
    assert_eq!(code(&forced), 4);
    assert!(stderr(&forced).contains("error:"));
}

#[test]
fn pipeline_commands_leave_expected_artifacts() {
    let tmp = TempDir::new().expect("tempdir");
    let cfg = smoke_config(tmp.path());

    let gen = run(&["--config", &cfg, "generate-data"]);
    assert_eq!(code(&gen), 0, "stderr: {}", stderr(&gen));
    for file in ["documents.jsonl", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert!(tmp.path().join("data").join(file).is_file(), "missing {file}");
    }

    let trained = run(&["--config", &cfg, "train"]);
    assert_eq!(code(&trained), 0, "stderr: {}", stderr(&trained));
    let stdout = String::from_utf8_lossy(&trained.stdout).into_owned();
    assert!(stdout.contains("best epoch"), "stdout: {stdout}");

    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs"))
        .expect("runs dir exists")
        .map(|e| e.expect("entry").path())
        .collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].join("model.ckpt").is_file());
    assert!(runs[0].join("train_log.csv").is_file());

    let eval = run(&["--config", &cfg, "evaluate"]);
    assert_eq!(code(&eval), 0, "stderr: {}", stderr(&eval));
    assert!(runs[0].join("metrics.json").is_file());
    assert!(runs[0].join("metrics.csv").is_file());

    // Overriding k moves the run to a different directory, so evaluate
    // must refuse to find a checkpoint there.
    let mismatched = run(&["--config", &cfg, "--k", "3", "evaluate"]);
    assert_eq!(code(&mismatched), 3);
}

#[test]
fn memorization_study_reports_gold_dependence() {
    let tmp = TempDir::new().expect("tempdir");
    // Long enough for the generator to pick up document tokens, so the
    // before-removal overlap the study divides by is positive.
    let cfg = smoke_config_with_epochs(tmp.path(), 12);
    assert_eq!(code(&run(&["--config", &cfg, "generate-data"])), 0);
    assert_eq!(code(&run(&["--config", &cfg, "train"])), 0);

    let study = run(&["--config", &cfg, "study", "memorization"]);
    assert_eq!(code(&study), 0, "stderr: {}", stderr(&study));
    let stdout = String::from_utf8_lossy(&study.stdout).into_owned();
    assert!(stdout.contains("top1 b1"), "stdout: {stdout}");

    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs"))
        .expect("runs dir exists")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.join("memorization.json").is_file())
        .collect();
    assert_eq!(runs.len(), 1);
}
