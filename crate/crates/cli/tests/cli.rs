//! End-to-end runs of the `rvm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn rvm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvm")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).to_string()
}

#[test]
fn corpus_run_succeeds_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let dots = dir.path().join("dot");
    let out = rvm(&[
        "run",
        "--report",
        path(&report),
        "--csv",
        path(&csv),
        "--emit-dot",
        path(&dots),
        "--dump-cycle",
        path(&corpus().join("classic")),
        path(&corpus().join("bbm")),
    ]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("0 mismatches"));

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["results"].as_array().unwrap().len() >= 4 * 13);
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.lines().next().unwrap().contains("verdict"));
    assert!(std::fs::read_dir(&dots).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "dot")));

    let table = rvm(&["table", path(&report)]);
    assert!(table.status.success());
    assert!(stdout(&table).contains("MP+dmbs"));
    let table_csv = rvm(&["table", "--csv", path(&report)]);
    assert!(table_csv.status.success());
    assert!(stdout(&table_csv).lines().count() > 13);
}

#[test]
fn empty_directory_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = rvm(&["run", path(dir.path())]);
    assert!(out.status.success(), "{}", stdout(&out));
}

#[test]
fn mismatch_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(corpus().join("classic/MP.vmtest")).unwrap();
    let wrong = text.replace("strong = allow", "strong = forbid");
    assert_ne!(text, wrong);
    std::fs::write(dir.path().join("MP.vmtest"), wrong).unwrap();
    let out = rvm(&["run", "--model", "strong", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
}

#[test]
fn malformed_test_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.vmtest"), "[name]\nbad\n[thread 0]\nFROB X0\n").unwrap();
    let out = rvm(&["run", path(dir.path())]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn meta_passes_and_mutation_fails() {
    let dir = corpus().join("mapping");
    assert!(rvm(&["meta", path(&dir)]).status.success());
    let out = rvm(&["meta", "--mutate", path(&corpus())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("counterexample ["));
}
