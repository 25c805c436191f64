use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tfctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfctl")).args(args).env_remove("TRIGGERFLOW_ROOT").output().expect("spawn tfctl")
}

fn ok_json(args: &[&str]) -> Value {
    let out = tfctl(args);
    assert!(out.status.success(), "tfctl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("tfctl {args:?} printed non-JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn sample(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../workflows").join(name).display().to_string()
}

#[test]
fn runs_sample_documents() {
    let dag = ok_json(&["dag", "run", &sample("listing.dag.json"), "--input", "2"]);
    assert_eq!(dag["status"], "finished");
    assert_eq!(dag["result"], json!([3, 4, 5, 6, 7]));
    let sm = ok_json(&["sm", "run", &sample("sizes.asl.json"), "--input", r#"{"items": [7, 1]}"#]);
    assert_eq!(sm["result"], "big");
    let code = ok_json(&["code", "run", "add3-listing", "--input", "0"]);
    assert_eq!(code["result"], json!({"result": 3, "map": [3, 4, 5]}));
}

#[test]
fn deploy_requires_storage_root() {
    let out = tfctl(&["dag", "deploy", &sample("listing.dag.json")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("storage root"));
}

#[test]
fn halted_dag_resumes_in_a_later_process() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().display().to_string();
    let doc = dir.path().join("pipe.json");
    let dag = json!({"dag_id": "pipe", "tasks": [
        {"task_id": "A", "operator": "invoke-task", "params": {"task": "double"}, "downstream": ["B"]},
        {"task_id": "B", "operator": "invoke-task", "params": {"task": "inc"}}]});
    std::fs::write(&doc, dag.to_string()).unwrap();

    assert_eq!(ok_json(&["--root", &root, "dag", "deploy", doc.to_str().unwrap()])["workflow_id"], "pipe");
    // `double` rejects a string, so A's failure parks and the run stalls.
    let stalled = ok_json(&["--root", &root, "dag", "run", "pipe", "--input", "\"x\"", "--timeout", "0.5"]);
    assert_eq!(stalled["status"], "running");
    let state = ok_json(&["--root", &root, "state", "pipe"]);
    assert_eq!(state["dlq_depth"], 1);

    let done = ok_json(&["--root", &root, "dag", "resume", "pipe", "--task", "A", "--output", "20"]);
    assert_eq!(done["status"], "finished");
    assert_eq!(done["result"], 21);
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out: PathBuf = dir.path().join("load.csv");
    let report = ok_json(&["bench", "load", "--events", "2000", "--out", out.to_str().unwrap()]);
    assert_eq!(report["fires"]["total"], 2000);
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.lines().count() > 1, "{csv}");
    assert!(dir.path().join("load.csv.json").exists());
}

#[test]
fn fed_run_is_seeded() {
    let args = ["--seed", "9", "fed", "run", "--rounds", "2", "--timeout", "0.5", "--mass-failure-round", "2"];
    let a = ok_json(&args);
    let b = ok_json(&args);
    let closed: Vec<&str> = a["rounds"].as_array().unwrap().iter().map(|r| r["closed_by"].as_str().unwrap()).collect();
    assert_eq!(closed, ["threshold", "timeout"]);
    assert_eq!(a["rounds"], b["rounds"]);
}

#[test]
fn bad_input_is_reported() {
    let out = tfctl(&["code", "run", "add3-listing", "--input", "{not json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--input"));
    let out = tfctl(&["code", "run", "no-such-program"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown program"));
}
