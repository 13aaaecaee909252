use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(fixture_name: &str, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-relex"))
        .arg("--config")
        .arg(fixture(fixture_name).join("config.toml"))
        .arg("--out")
        .arg(out)
        .arg("--mock-providers")
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ingest_prints_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("tiny", tmp.path(), &["ingest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("6 instances"), "{stdout}");
    assert!(stdout.contains("3 relations plus no_relation"), "{stdout}");
    assert!(tmp.path().join("corpus/schema.json").exists());
}

#[test]
fn epr_without_adapter_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("mock40", tmp.path(), &["predict"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("adapter.bin"), "{err}");
    assert!(err.contains("epr-train"), "{err}");
}

#[test]
fn api_key_in_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("tiny", tmp.path(), &["--set", "provider.api_key=sk-123", "show-config"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("sk-123"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("tiny", tmp.path(), &["--set", "retriever.kk=3", "show-config"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn dry_run_prints_a_prompt_and_writes_no_records() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("tiny", tmp.path(), &["predict", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Relation:"));
    assert!(!tmp.path().join("records.jsonl").exists());
}

#[test]
fn predict_then_evaluate_on_tiny() {
    let tmp = tempfile::tempdir().unwrap();
    for step in ["predict", "evaluate"] {
        let o = run("tiny", tmp.path(), &[step]);
        assert!(o.status.success(), "{step}: {}", stderr(&o));
    }
    let records = fs::read_to_string(tmp.path().join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 2);
}

#[test]
fn compare_refuses_different_test_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for step in ["predict", "evaluate"] {
        assert!(run("tiny", &a, &[step]).status.success());
        assert!(run("mock40", &b, &["--set", "retriever.kind=knn", step]).status.success());
    }
    let same = run("tiny", &a, &["compare", a.join("report.json").to_str().unwrap(), a.join("report.json").to_str().unwrap()]);
    assert!(same.status.success(), "{}", stderr(&same));
    let o = run("tiny", &a, &["compare", a.join("report.json").to_str().unwrap(), b.join("report.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
