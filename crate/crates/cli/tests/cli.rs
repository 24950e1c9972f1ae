use std::path::Path;
use std::process::{Command, Output};

fn hnu(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hnu"))
        .args(args)
        .env("HNU_DATA_DIR", data)
        .output()
        .expect("binary runs")
}

fn ok(data: &Path, args: &[&str]) -> String {
    let out = hnu(data, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["hint", "--problem", "nope"][..],
        &["simulate", "--policy", "sometimes"],
        &["build-network"],
        &["gen-corpus", "--policy", "adaptive"],
    ] {
        let out = hnu(dir.path(), args);
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
        let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
}

#[test]
fn pipeline_is_idempotent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(dir, &["gen-corpus", "--students", "6", "--seed", "3"]);
        ok(dir, &["build-network"]);
        ok(dir, &["label", "--penalty", "off"]);
        ok(dir, &["train", "--trees", "5", "--seed", "3"]);
    }
    for file in ["corpus.jsonl", "labels.jsonl", "model.json", "networks/train-01.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between identical runs");
    }
    let hint = ok(a.path(), &["hint", "--problem", "train-01"]);
    let v: serde_json::Value = serde_json::from_str(hint.trim()).unwrap();
    assert!(v["statement"].is_string());
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--policy", "control", "--seed", "7", "--students", "4", "--seed-students", "6"];
    let first = ok(dir.path(), &args);
    let report = std::fs::read(dir.path().join("report.json")).unwrap();
    let second = ok(dir.path(), &args);
    assert_eq!(first, second);
    assert_eq!(report, std::fs::read(dir.path().join("report.json")).unwrap());
}

#[test]
fn cv3_has_three_folds_and_a_mean() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(dir.path(), &["evaluate", "--protocol", "cv3", "--planted"]);
    let dispatch: Vec<&str> = table.lines().filter(|l| l.contains("dispatch")).collect();
    assert_eq!(dispatch.len(), 4, "{table}");
    assert!(dispatch[3].contains("mean"));
    assert!(dir.path().join("eval-cv3.json").exists());
}
