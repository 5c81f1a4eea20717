use std::path::PathBuf;

use assert_cmd::Command;

fn preset(name: &str) -> String {
    format!("{}/../../presets/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

fn moesim() -> Command {
    Command::cargo_bin("moesim").unwrap()
}

fn stdout_of(args: &[&str]) -> String {
    let out = moesim().args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_writes_json_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds.json");
    let p = preset("deepseek-r1");
    stdout_of(&["simulate", &p, "--placement", "ssd", "--batch", "1024", "--out", out.to_str().unwrap()]);
    let ssd: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    stdout_of(&["simulate", &p, "--placement", "hbm", "--batch", "1024", "--out", out.to_str().unwrap()]);
    let hbm: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let ratio = ssd["per_token_j"].as_f64().unwrap() / hbm["per_token_j"].as_f64().unwrap();
    assert!((3.9..=5.9).contains(&ratio), "{ratio}");

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ds.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"][0]["path"], "ds.json");
    assert_eq!(manifest["seed"], 20250601);
    assert!(manifest.get("wall_clock_s").is_none());
}

#[test]
fn presets_resolve_by_name() {
    let text = stdout_of(&["simulate", "mixtral", "--baseline"]);
    assert!(text.contains("per-token energy"));
    assert!(text.contains("vs HBM baseline      energy 1.000x"));
}

#[test]
fn zero_batch_fails() {
    fails_with(&["simulate", &preset("mixtral"), "--batch", "0"], "batch");
}

#[test]
fn missing_config_fails() {
    fails_with(&["simulate", "/nonexistent/scenario.json"], "/nonexistent/scenario.json");
}

#[test]
fn stats_examples() {
    let text = stdout_of(&["stats", "8", "2", "16", "4"]);
    assert!(text.contains("closed form 7.920"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&stdout_of(&["stats", "256", "8", "64", "32", "--format", "json"])).unwrap();
    assert!((json["expected_unique"].as_f64().unwrap() - 222.4).abs() < 0.1);
    fails_with(&["stats", "8", "9", "1", "4"], "top_k exceeds N_ex");
}

#[test]
fn sweep_reports_crossovers_and_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let text = stdout_of(&[
        "sweep",
        &preset("llama4-maverick"),
        &preset("llama3.3-70b"),
        "--batches",
        "1,4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(text.contains("B=1"));
    let grid = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(grid.starts_with("batch_size,flash_scale,ratio\n"));
    // Two batch sizes, nine default scales.
    assert_eq!(grid.lines().count(), 1 + 2 * 9);
    assert!(out.join("crossovers.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn unwritable_output_leaves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    // A path below a regular file cannot be created.
    let out: PathBuf = blocker.join("sub");
    moesim()
        .args(["sweep", &preset("llama4-maverick"), &preset("llama3.3-70b"), "--batches", "1", "--out"])
        .arg(&out)
        .assert()
        .failure();
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);

    moesim()
        .args(["simulate", &preset("mixtral"), "--out"])
        .arg(blocker.join("x.json"))
        .assert()
        .failure();
    assert_eq!(std::fs::read(&blocker).unwrap(), b"x");
}

#[test]
fn compare_and_latency_csv_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cmp = dir.path().join("cmp.csv");
    stdout_of(&["compare", &preset("mixtral"), "--batches", "1", "--out", cmp.to_str().unwrap()]);
    let text = std::fs::read_to_string(&cmp).unwrap();
    assert!(text.starts_with("model,batch_size,placement,per_token_j,"));
    assert_eq!(text.lines().count(), 4);

    let lat = dir.path().join("lat.csv");
    stdout_of(&["latency", &preset("mixtral"), "--placements", "hbm,ssd", "--out", lat.to_str().unwrap()]);
    let text = std::fs::read_to_string(&lat).unwrap();
    assert!(text.starts_with("model,batch_size,cluster,placement,"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn runtime_is_recorded_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    stdout_of(&["--record-runtime", "stats", "8", "2", "4", "4", "--out", out.to_str().unwrap()]);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("s.json.manifest.json")).unwrap()).unwrap();
    assert!(m["wall_clock_s"].as_f64().unwrap() >= 0.0);
}

fn fails_with(args: &[&str], needle: &str) {
    let out = moesim().args(args).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "{err}");
}
