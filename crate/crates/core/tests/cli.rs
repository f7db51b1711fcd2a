use std::process::{Command, Output};

use serde_json::Value;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-bench"))
        .args(args)
        .output()
        .expect("run hybrid-bench")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

#[test]
fn verify_all_passes() {
    let out = bench(&["verify", "--suite", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["passed"], true);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 10);
    for c in checks {
        assert!(c["name"].is_string());
        assert!(c["suite"].is_string());
        assert!(c["max_error"].is_number());
        assert!(c["tolerance"].is_number());
        assert_eq!(c["passed"], true, "{c}");
    }
}

#[test]
fn injected_perturbation_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = bench(&[
        "verify",
        "--suite",
        "equivalence",
        "--inject-perturbation",
        "1e-3",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report, json(&out));
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["chunked_vs_recurrent"]);
}

#[test]
fn bad_input_exits_2() {
    let out = bench(&["bench", "tokens", "--config", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = bench(&["bench", "frames", "--tokens-per-frame", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn token_csv_schema_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| -> Vec<Vec<String>> {
        let path = dir.path().join(name);
        let out = bench(&["bench", "tokens", "--steps", "12", "--warmup", "64", "--out", path.to_str().unwrap()]);
        assert!(out.status.success());
        let summary = json(&out);
        assert_eq!(summary["steps"], 12);
        assert_eq!(summary["first_state_bytes"], summary["last_state_bytes"]);
        csv::Reader::from_path(&path)
            .unwrap()
            .records()
            .map(|r| r.unwrap().iter().map(String::from).collect())
            .collect()
    };
    let a = read("a.csv");
    let b = read("b.csv");
    let header: Vec<String> = csv::Reader::from_path(dir.path().join("a.csv"))
        .unwrap()
        .headers()
        .unwrap()
        .iter()
        .map(String::from)
        .collect();
    let mut want = vec!["step".to_string(), "latency_ns".into(), "state_bytes".into()];
    want.extend((0..6).map(|i| format!("norm_layer_{i}")));
    assert_eq!(header, want);
    assert_eq!(a.len(), 12);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x[0], y[0]);
        assert_eq!(x[2], y[2]);
        assert_eq!(x[3..], y[3..]);
    }
    assert_eq!(a[0][0], "65");
}

#[test]
fn baseline_frames_slow_down() {
    let out = bench(&["bench", "frames", "--baseline", "--frames", "4", "--tokens-per-frame", "2", "--lanes", "2"]);
    assert!(out.status.success());
    let s = json(&out);
    assert_eq!(s["baseline"], true);
    assert_eq!(s["frames"], 4);
    assert_eq!(s["tokens_per_frame"], 2);
}

#[test]
fn norm_trace_summary() {
    let out = bench(&["trace", "norms", "--steps", "40"]);
    assert!(out.status.success());
    let s = json(&out);
    assert_eq!(s["bound_violations"], 0);
    assert!(s["max_bound_ratio"].as_f64().unwrap() <= 1.0);
    assert_eq!(s["second_half"].as_array().unwrap().len(), 6);
}

#[test]
fn shapes_micro() {
    let out = bench(&["shapes", "--preset", "micro"]);
    assert!(out.status.success());
    let s = json(&out);
    assert_eq!(s["n_swa_layers"], 2);
    assert_eq!(s["n_gdn_layers"], 6);
    assert_eq!(s["block_pattern"][1], serde_json::json!(["SWA", "GDN", "GDN", "GDN"]));
}
