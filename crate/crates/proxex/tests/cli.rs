//! The `proxex` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn proxex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxex")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn write_config(dir: &Path) -> String {
    let config = json!({
        "task": {"kind": "sentiment"},
        "models": {
            "models": [
                {"model_id": "small", "endpoint": "mock:small"},
                {"model_id": "large", "endpoint": "mock:large"}
            ],
            "mocks": {
                "small": {"kind": "linear-sentiment", "weights": {"good": 2.0, "bad": -2.0}},
                "large": {"kind": "linear-sentiment", "weights": {"good": 1.0, "bad": -3.0, "plot": -0.5}}
            }
        },
        "dataset": {"id": "reviews", "instances": [
            {"id": "r/1", "text": "a good film", "gold": "positive"},
            {"id": "r/2", "text": "bad plot", "gold": "negative"}
        ]},
        "n_samples": 50,
        "proxy_model": "small",
        "target_model": "large"
    });
    let path = dir.join("run.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn explain_and_matrix_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.display().to_string();

    let run = proxex(&["explain", "--config", &config, "--out", &out_s, "--method", "lime", "--samples", "20"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary = read_json(&out.join("explain.json"));
    assert_eq!(summary["command"], "explain");
    assert_eq!(summary["config"]["explain"]["method"], "lime");
    assert_eq!(summary["config"]["explain"]["n_samples"], 20);
    assert_eq!(summary["result"].as_array().unwrap().len(), 2);
    let attr = read_json(&out.join("attributions/r_1.json"));
    assert_eq!(attr["features"], json!(["a", "good", "film"]));
    assert_eq!(attr["attributions"][0]["target_model_id"], "large");
    assert!(dir.path().join("store.jsonl").exists());
    assert_eq!(read_json(&out.join("failures.json")), json!([]));
    let session = read_json(&out.join("session.json"));
    assert!(session["live_queries"].as_u64().unwrap() > 0);

    let run = proxex(&["matrix", "--config", &config, "--out", &out_s]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(out.join("matrix.csv")).unwrap();
    assert!(csv.starts_with("proxy\\target,small,large\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(out.join("matrix.svg")).unwrap().starts_with("<svg"));
    let matrix = read_json(&out.join("matrix.json"));
    assert_eq!(matrix["result"]["cells"].as_array().unwrap().len(), 4);

    let run = proxex(&["aopc", "--config", &config, "--out", &out_s]);
    assert_eq!(code(&run), 0);
    assert!(read_json(&out.join("aopc.json"))["result"]["corpus_aopc"].is_number());
}

#[test]
fn configuration_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out").display().to_string();

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"task": {"kind": "sentiment"}, "models": {}, "dataset": {"id": "x"}, "typo": 1}"#).unwrap();
    let run = proxex(&["explain", "--config", bad.to_str().unwrap(), "--out", &out]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("error"));

    assert_eq!(code(&proxex(&["explain", "--config", &config, "--method", "gradients", "--out", &out])), 1);
    assert_eq!(code(&proxex(&["explain", "--config", &config, "--segmentation", "para", "--out", &out])), 1);
    assert_eq!(code(&proxex(&["explain", "--config", &config, "--instances", "nope", "--out", &out])), 1);
    assert_eq!(code(&proxex(&["explain", "--config", "/no/such/file.json"])), 1);
}

#[test]
fn replay_misses_are_partial_failures() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");
    let store = dir.path().join("empty.jsonl").display().to_string();
    let run = proxex(&["explain", "--config", &config, "--replay-only", "--store", &store, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 2);
    let failures = read_json(&out.join("failures.json"));
    assert_eq!(failures.as_array().unwrap().len(), 2);
    assert!(failures[0]["error"].as_str().unwrap().contains("replay"));
    assert!(!dir.path().join("empty.jsonl").exists());

    // Warm one instance, then replay both.
    let run = proxex(&["explain", "--config", &config, "--instances", "r/2", "--store", &store, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0);
    let run = proxex(&["explain", "--config", &config, "--replay-only", "--store", &store, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 2);
    let failures = read_json(&out.join("failures.json"));
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert_eq!(failures[0]["unit"], "r/1");
}

#[test]
fn cost_and_import() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out").display().to_string();
    assert_eq!(code(&proxex(&["explain", "--config", &config, "--out", &out])), 0);
    let store = dir.path().join("store.jsonl");

    // Without the registry the mock models have no price.
    let run = proxex(&["cost", "--store", store.to_str().unwrap()]);
    assert_eq!(code(&run), 2);
    let cost: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(cost["cost"]["unpriced"], json!(["small"]));
    let run = proxex(&["cost", "--store", store.to_str().unwrap(), "--config", &config]);
    assert_eq!(code(&run), 0);
    let cost: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(cost["cost"]["total_usd"], 0.0);
    assert!(cost["records"].as_u64().unwrap() > 0);

    // A release with renamed fields.
    let text = std::fs::read_to_string(&store).unwrap();
    let release = dir.path().join("release.jsonl");
    std::fs::write(&release, text.replace("\"output_text\"", "\"response\"")).unwrap();
    let records = text.lines().count();
    let manifest = json!({
        "datasets": ["reviews"], "models": ["small"], "segmentation_modes": ["word"],
        "record_counts": {"small": records}, "field_map": {"response": "output_text"}
    });
    let manifest_path = dir.path().join("manifest.json");
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();
    let imported = dir.path().join("imported.jsonl");
    let run = proxex(&[
        "import",
        "--release",
        release.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--store",
        imported.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["records"], records);
    assert_eq!(report["per_model_dataset"]["small/reviews"], records);
    assert_eq!(std::fs::read_to_string(&imported).unwrap().lines().count(), records);

    // Wrong expected count.
    let manifest = json!({
        "datasets": ["reviews"], "models": ["small"], "segmentation_modes": ["word"],
        "record_counts": {"small": records + 1}, "field_map": {"response": "output_text"}
    });
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();
    let run = proxex(&["import", "--release", release.to_str().unwrap(), "--manifest", manifest_path.to_str().unwrap()]);
    assert_eq!(code(&run), 1);
}

#[test]
fn compress_reports_mdta() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({
        "task": {"kind": "multiple-choice", "icl_examples": (1..=5).map(|i| format!("Example ex-{i}\nAnswer: B")).collect::<Vec<_>>()},
        "models": {
            "models": [{"model_id": "mc", "endpoint": "mock:mc"}],
            "mocks": {"mc": {"kind": "choice-table", "features": ["ex-3", "ex-5"], "table": {"11": "B"}, "default": "C"}}
        },
        "dataset": {"id": "quiz", "instances": (0..3).map(|i| json!({"id": format!("q{i}"), "text": format!("Q{i}?"), "gold": "B"})).collect::<Vec<_>>()},
        "n_samples": 64,
        "target_model": "mc",
        "compress": {"repeats": 5}
    });
    let path = dir.path().join("run.json");
    std::fs::write(&path, config.to_string()).unwrap();
    let out = dir.path().join("out");
    let run = proxex(&["compress", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = read_json(&out.join("compression.json"));
    assert_eq!(report["result"][0]["oracle"]["mdta"], 3.0);
    assert_eq!(report["result"][0]["subject_id"], "quiz");
    let csv = std::fs::read_to_string(out.join("compression.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(5), Some("3"));
}
