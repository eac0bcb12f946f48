use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fnlp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fnlp"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("run fnlp")
}

#[test]
fn gen_writes_graphs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = fnlp(
        dir.path(),
        &["gen", "--regime", "blocks", "--n", "3", "--seed", "4"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines = fs::read_to_string(dir.path().join("generated.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gen_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["outputs"][0]["name"], "generated.jsonl");
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn unknown_regime_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fnlp(dir.path(), &["gen", "--regime", "towers", "--n", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown regime"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[bench.solver]\nfeas_tol = -1.0\n").unwrap();
    let out = fnlp(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "gen", "--n", "1"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bench.solver"));
}

#[test]
fn bench_without_infeasible_instances_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    fs::write(&data, "").unwrap();
    let out = fnlp(dir.path(), &["bench", "--data", data.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no infeasible instance"));
}

#[test]
fn missing_model_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    fs::write(&data, "").unwrap();
    let model = dir.path().join("nope.json");
    let out = fnlp(
        dir.path(),
        &[
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading model"));
}
