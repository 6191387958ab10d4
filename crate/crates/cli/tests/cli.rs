use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn pricer(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pricer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "pricer {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Synthetic marketplace, pool and graph index in `dir`.
fn prepare(dir: &Path, queries: &str) {
    pricer(dir, &["synth", "--out-dir", "d", "--queries", queries]);
    pricer(
        dir,
        &[
            "pool",
            "--listings",
            "d/listings.jsonl",
            "--rules",
            "d/rules.json",
            "--as-of",
            "2025-06-01T00:00:00Z",
            "--out",
            "pool.jsonl",
        ],
    );
    pricer(dir, &["index", "build", "--pool", "pool.jsonl", "--out", "index.jsonl", "--ann"]);
}

#[test]
fn batch_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "40");

    let report = json(&pricer(
        dir,
        &[
            "eval", "run", "--index", "index.jsonl", "--queries", "d/queries.jsonl", "--theta", "1.5",
            "--predictions", "pred.jsonl",
        ],
    ));
    assert_eq!(report["counts"]["total"], 40);
    assert!(report["metrics"]["overall"]["sar"].as_f64().unwrap() > 0.9);
    let lines = std::fs::read_to_string(dir.join("pred.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 40);

    pricer(
        dir,
        &["eval", "pr-sweep", "--predictions", "pred.jsonl", "--csv", "pr.csv", "--summary", "pr.json"],
    );
    let csv = std::fs::read_to_string(dir.join("pr.csv")).unwrap();
    assert!(csv.starts_with("threshold,coverage,precision\n"));
    assert!(csv.trim_end().ends_with("inf,1,1"));

    let ks = json(&pricer(
        dir,
        &["eval", "k-sweep", "--index", "index.jsonl", "--queries", "d/queries.jsonl", "--theta", "1e9", "--ks", "0,5"],
    ));
    let sar = |row: &Value| row["metrics"]["overall"]["sar"].as_f64().unwrap();
    assert!(sar(&ks[1]) > sar(&ks[0]));

    let listing = dir.join("one.json");
    let first = lines.lines().next().unwrap();
    let qid: Value = serde_json::from_str(first).unwrap();
    let queries = std::fs::read_to_string(dir.join("d/queries.jsonl")).unwrap();
    let q = queries.lines().find(|l| l.contains(qid["query_id"].as_str().unwrap())).unwrap();
    std::fs::write(&listing, q).unwrap();
    let s = json(&pricer(dir, &["price", "--index", "index.jsonl", "--listing", "one.json", "--theta", "1.5"]));
    assert_eq!(s["status"], "priced");
    assert_eq!(s["n_refs"], 50);
}

#[test]
fn datagen_writes_hybrid_records_and_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "20");
    let summary = json(&pricer(
        dir,
        &[
            "datagen", "--index", "index.jsonl", "--queries", "d/queries.jsonl", "--k", "10", "--split", "0.5",
            "--out", "sft.jsonl", "--audit", "audit.jsonl", "--holdout", "holdout.jsonl",
        ],
    ));
    assert_eq!(summary["queries"], 10);
    let accepted = summary["accepted"].as_u64().unwrap();
    let records = std::fs::read_to_string(dir.join("sft.jsonl")).unwrap();
    assert_eq!(records.lines().count() as u64, 2 * accepted);
    assert_eq!(std::fs::read_to_string(dir.join("audit.jsonl")).unwrap().lines().count(), 10);
    assert_eq!(std::fs::read_to_string(dir.join("holdout.jsonl")).unwrap().lines().count(), 10);
}

#[test]
fn reward_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let r = json(&pricer(dir, &["reward", "score", "--pred", "120", "--truth", "100", "--cited", "B1", "--golden", "B1,B2"]));
    assert!((r["reward"].as_f64().unwrap() - 0.25).abs() < 1e-12);

    let group = serde_json::json!({
        "group_id": "g1",
        "truth": 100.0,
        "golden": ["B1"],
        "samples": [
            {"predicted": 100.0, "cited": ["B1"], "policy": [-0.1], "old": [-0.1], "reference": [-0.1]},
            {"predicted": 150.0, "cited": [], "policy": [-0.2], "old": [-0.2], "reference": [-0.2]},
        ],
    });
    std::fs::write(dir.join("groups.jsonl"), format!("{group}\n")).unwrap();
    let out = pricer(dir, &["reward", "batch", "--groups", "groups.jsonl", "--group-size", "2"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let adv: Vec<f64> = report["advantages"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((adv[0] - 1.0).abs() < 1e-9 && (adv[1] + 1.0).abs() < 1e-9);
    assert!(report["mean_kl"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn missing_threshold_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "4");
    let out = Command::new(env!("CARGO_BIN_EXE_pricer"))
        .current_dir(dir)
        .args(["eval", "run", "--index", "index.jsonl", "--queries", "d/queries.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshold"));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn http_service_prices_and_reports_index() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "12");
    let mut child = Command::new(env!("CARGO_BIN_EXE_pricer"))
        .current_dir(dir)
        .args([
            "serve", "--index", "index.jsonl", "--pool", "pool.jsonl", "--addr", "127.0.0.1:0", "--theta", "1.5",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("address line").to_string();

    let http = reqwest::blocking::Client::new();
    let health: Value = http.get(format!("{base}/v1/healthz")).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");

    let info: Value = http.get(format!("{base}/v1/index/info")).send().unwrap().json().unwrap();
    assert!(info["entries"].as_u64().unwrap() > 0);
    assert_eq!(info["has_graph"], true);
    assert_eq!(info["model_id"], "mock-median-pricer");

    let queries = std::fs::read_to_string(dir.join("d/queries.jsonl")).unwrap();
    let q: Value = serde_json::from_str(queries.lines().next().unwrap()).unwrap();
    let body = serde_json::json!({
        "title": q["title"], "description": q["description"], "condition": q["condition"],
    });
    let resp = http.post(format!("{base}/v1/price")).json(&body).send().unwrap();
    assert_eq!(resp.status(), 200);
    let s: Value = resp.json().unwrap();
    assert_eq!(s["status"], "priced");
    let truth = q["price"].as_f64().unwrap();
    assert!((s["price"].as_f64().unwrap() - truth).abs() / truth < 0.2);

    let unknown = serde_json::json!({ "title": "zzqx unknown gadget", "description": "", "condition": "" });
    let s: Value = http.post(format!("{base}/v1/price")).json(&unknown).send().unwrap().json().unwrap();
    assert_ne!(s["status"], "error");

    let bad = http.post(format!("{base}/v1/price")).body("{}").header("content-type", "application/json").send().unwrap();
    assert!(bad.status().is_client_error());
    drop(server);
}
