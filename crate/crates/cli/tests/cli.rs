use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn semilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semilab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, v: serde_json::Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p.display().to_string()
}

#[test]
fn list_is_stable_and_complete() {
    let a = semilab(&["list"]);
    let b = semilab(&["list"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    for name in ["dichotomy_study", "fpk_residual", "hjb_hopf_cole"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn every_listed_name_is_dispatchable() {
    let text = String::from_utf8(semilab(&["list"]).stdout).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for name in text.lines().map(|l| l.split_whitespace().next().unwrap()) {
        assert!(semilab::experiments::Params::parse(name, &serde_json::Value::Null).is_ok(), "{name}");
    }
    // a validated suite with every name, but nothing executed: negative seed is a type error
    let all: Vec<_> = text.lines().map(|l| json!({ "name": l.split_whitespace().next().unwrap() })).collect();
    let cfg = write_config(dir.path(), json!({ "name": "x", "master_seed": -1, "output_dir": "out", "experiments": all }));
    assert_eq!(semilab(&["run", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn dichotomy_config_runs_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let cfg = write_config(
        dir.path(),
        json!({
            "name": "dichotomy",
            "master_seed": 7,
            "output_dir": out,
            "experiments": [{ "name": "dichotomy_study", "params": { "ladder": [0.5, 0.1, 0.01, 0.001] } }]
        }),
    );
    let r = semilab(&["run", "--config", &cfg]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stdout));
    let csv = std::fs::read_to_string(out.join("00_dichotomy_study/dichotomy.csv")).unwrap();
    assert!(csv.starts_with("t,compact_sup,far_sup,far_argmax\r\n"));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["suite"], "dichotomy");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["git-describe"].is_string());
    assert_eq!(manifest["experiments"][0]["pass"], true);
    // the manifest's params re-validate
    let params = &manifest["experiments"][0]["params"];
    assert!(semilab::experiments::Params::parse("dichotomy_study", params).is_ok());
}

#[test]
fn failing_checks_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({
            "name": "strict",
            "output_dir": dir.path().join("out"),
            "experiments": [{ "name": "dichotomy_study", "params": { "compact_tol": 1e-9 } }]
        }),
    );
    let r = semilab(&["run", "--config", &cfg]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stdout).contains("compact_at_smallest_t"));
}

#[test]
fn invalid_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        json!({ "name": "neg", "output_dir": out, "experiments": [{ "name": "dichotomy_study", "params": { "compact_tol": -0.05 } }] }),
        json!({ "name": "missing", "output_dir": out, "experiments": [{ "name": "no_such_experiment" }] }),
        json!({ "name": "extra", "output_dir": out, "experiments": [], "tolerance": 1 }),
        json!({ "name": "param", "output_dir": out, "experiments": [{ "name": "fpk_residual", "params": { "particle": 10 } }] }),
    ];
    for c in cases {
        let cfg = write_config(dir.path(), c.clone());
        assert_eq!(semilab(&["run", "--config", &cfg]).status.code(), Some(2), "{c}");
    }
    assert!(!out.exists());
    assert_eq!(semilab(&["run", "--config", "/nonexistent/config.json"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    // far too few nodes for the density to decay at the edges
    let cfg = write_config(
        dir.path(),
        json!({
            "name": "broken",
            "output_dir": dir.path().join("out"),
            "experiments": [
                { "name": "sequential_convergence" },
                { "name": "mehler_fourier", "params": { "density": { "half_width": 1.0, "nodes": 33 }, "samples": 1000 } }
            ]
        }),
    );
    let r = semilab(&["run", "--config", &cfg]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stdout));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiments"][0]["pass"], true);
    assert!(manifest["experiments"][1]["error"].is_string());
}
