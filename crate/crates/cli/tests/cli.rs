use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn vfm")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("stdout line");
    serde_json::from_str(line).expect("json on stdout")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn sample_with_oracle_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = vfm(
        &[
            "sample", "--oracle", "--schedule", "third-degree", "--flow", "sc-interp", "--solver", "heun", "--steps",
            "8", "--count", "128", "--trajectories", "4", "--out", "s",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = stdout_json(&out);
    assert_eq!(metrics["nfe"], 16);
    assert_eq!(metrics["finite"], true);
    for f in ["samples.csv", "trajectories.csv", "metrics.json"] {
        assert!(dir.path().join("s").join(f).exists(), "{f}");
    }
    let samples = std::fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 129);
}

#[test]
fn sample_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = vfm(
            &["sample", "--oracle", "--schedule", "vp", "--steps", "5", "--count", "64", "--seed", "9", "--out", name],
            dir.path(),
        );
        assert_eq!(code(&out), 0);
    }
    let a = std::fs::read(dir.path().join("a/samples.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/samples.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["sample", "--oracle", "--out", "x"],
        &["sample", "--oracle", "--schedule", "nope", "--out", "x"],
        &["sample", "--oracle", "--schedule", "vp", "--flow", "posterior", "--target", "ve", "--out", "x"],
        &["sample", "--oracle", "--schedule", "vp", "--eps", "0", "--out", "x"],
    ];
    for args in cases {
        let out = vfm(args, dir.path());
        assert_eq!(code(&out), 1, "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    write(dir.path(), "bad.json", r#"{"schedule": "vp", "source": "oracle", "cells": [], "extra": 1}"#);
    let out = vfm(&["run", "--config", "bad.json", "--out", "r"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));
    let out = vfm(&["metrics", "--a", "missing.csv", "--b", "missing.csv"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn non_finite_samples_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.json",
        r#"{"schedule": "third-degree", "source": {"constant": [1e308, 1e308]}, "count": 8,
            "cells": [{"flow": "sc-interp", "solver": "euler", "steps": [4]}]}"#,
    );
    let out = vfm(&["run", "--config", "run.json", "--out", "r"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_sample_and_reflow_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "train.json",
        r#"{"schedule": "third-degree", "dataset": {"n": 1000},
            "train": {"iterations": 30, "batch": 64, "n_data": 1000}}"#,
    );
    let out = vfm(&["train", "--config", "train.json", "--out", "m.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["iterations"], 30);

    let out = vfm(&["sample", "--model", "m.json", "--steps", "4", "--count", "32", "--out", "s"], dir.path());
    assert_eq!(code(&out), 0);
    let out = vfm(
        &["sample", "--model", "m.json", "--schedule", "vp", "--steps", "4", "--count", "32", "--out", "s"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);

    write(
        dir.path(),
        "reflow.json",
        r#"{"reflow": {"steps": 4, "train": {"iterations": 10, "batch": 32, "n_data": 200}}}"#,
    );
    let out = vfm(&["reflow", "--teacher", "m.json", "--config", "reflow.json", "--out", "r.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let student: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(student["schedule_id"], "rectified");
}

#[test]
fn run_writes_manifest_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.json",
        r#"{"schedule": "third-degree", "source": "oracle", "count": 64, "seed": 3,
            "cells": [{"flow": "sc-interp", "solver": "euler", "steps": [2, 4]},
                      {"flow": "sc-interp", "solver": "ab2", "steps": [4], "target": "vp"}]}"#,
    );
    let out = vfm(&["run", "--config", "run.json", "--out", "r"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/manifest.json")).unwrap()).unwrap();
    let cells = manifest["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    for cell in cells {
        let sub = dir.path().join("r").join(cell["dir"].as_str().unwrap());
        assert!(sub.join("samples.csv").exists());
    }
}

#[test]
fn metrics_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.csv", "x_0,x_1\n0.0,1.0\n2.0,-1.0\n3.0,0.5\n");
    let out = vfm(&["metrics", "--a", "a.csv", "--b", "a.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = stdout_json(&out);
    assert_eq!(m["energy_distance"].as_f64().unwrap(), 0.0);
    assert_eq!(m["trajectory_rmse"].as_f64().unwrap(), 0.0);
}

#[test]
fn convergence_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = vfm(
        &[
            "convergence", "--oracle", "--schedule", "rectified", "--methods", "euler,heun", "--steps", "8,16",
            "--reference-steps", "256", "--count", "16", "--out", "c",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("c/convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c/convergence.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
}
