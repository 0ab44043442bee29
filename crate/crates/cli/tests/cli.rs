use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attnlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlab")).args(args).output().expect("spawn attnlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_job(eta: f64) -> String {
    format!(
        r#"{{
  "data": {{"d": 32, "mu_norm": 8.0, "sigma_p": 1.0, "alpha": 0.0, "n": 8}},
  "model": {{"d": 32, "m_k": 8, "m_v": 8, "sigma_k": 0.01, "sigma_v": 0.01}},
  "train": {{"eta": {eta}, "max_iters": 300, "record_every": 5}},
  "seed": 4,
  "n_mc": 500
}}"#
    )
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gradcheck_passes() {
    let o = attnlab(&["gradcheck", "--instances", "5", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max rel. error"));
}

#[test]
fn gradcheck_reports_failure_with_numerical_code() {
    let o = attnlab(&["gradcheck", "--instances", "2", "--tolerance", "1e-300"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_writes_record_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("job.json");
    write(&cfg, &small_job(1.0));
    let out = dir.path().join("run");
    let o = attnlab(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let record = fs::read_to_string(out.join("record.csv")).unwrap();
    assert!(record.starts_with("iteration,train_loss,"));
    assert!(record.lines().count() > 2);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 4);
    assert!(side["result"]["test"]["loss"].is_number());
    assert!(side["result"]["termination"].is_string());
    assert!(out.join("params.bin").exists());

    // A second run into the same directory needs --force.
    let o = attnlab(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));

    // The sidecar reloads as a config and reproduces the record.
    let again = dir.path().join("again");
    let o = attnlab(&["train", "--config", p(&out.join("run.json")), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(out.join("record.csv")).unwrap(), fs::read(again.join("record.csv")).unwrap());
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("job.json");
    write(&cfg, &small_job(1.0));
    let out = dir.path().join("run");
    let o = attnlab(&["train", "--config", p(&cfg), "--out", p(&out), "--seed", "99"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 99);
    assert_eq!(side["seed_override"]["original"], 4);
}

#[test]
fn zero_learning_rate_hits_cap_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("job.json");
    write(&cfg, &small_job(0.0));
    let out = dir.path().join("run");
    let o = attnlab(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("iteration cap"));
    let o = attnlab(&["stages", "--record", p(&out.join("record.csv"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("t1_hat = absent"));
}

#[test]
fn divergence_exits_nonzero_and_keeps_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("job.json");
    write(&cfg, &small_job(1e200));
    let out = dir.path().join("run");
    let o = attnlab(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(out.join("record.csv").exists());
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert!(side["result"]["error"].is_string());
}

#[test]
fn malformed_config_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("job.json");
    write(&cfg, "{\n  \"data\": {\"d\": 4,\n}");
    let o = attnlab(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn invalid_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("job.json");
    write(&cfg, &small_job(1.0).replace("\"alpha\": 0.0", "\"alpha\": 0.7"));
    let o = attnlab(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("alpha"));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = attnlab(&["stages", "--record", p(&dir.path().join("nope.csv"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = attnlab(&["train", "--bogus"]);
    assert_eq!(code(&o), 2);
}

const GRID: &str = r#"{
  "axes": {"n": [2, 6, 12], "mu_norm": [1.0, 6.0, 30.0], "sigma_p": [1.0], "alpha": [0.0], "eta": [1.0], "sigma_v": [0.01]},
  "fixed": {"d": 32, "m_k": 8, "m_v": 8, "sigma_k": 0.01, "max_iters": 400, "n_mc": 400},
  "repeats": 2,
  "base_seed": 5
}"#;

#[test]
fn sweep_is_deterministic_and_feeds_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("grid.json");
    write(&m, GRID);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = attnlab(&["sweep", "--manifest", p(&m), "--out", p(&a), "--jobs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = attnlab(&["sweep", "--manifest", p(&m), "--out", p(&b), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cells = fs::read(a.join("cells.csv")).unwrap();
    assert_eq!(cells, fs::read(b.join("cells.csv")).unwrap());
    for f in ["runs.csv", "sweep.json", "heatmap.svg", "critical.json"] {
        assert!(a.join(f).exists(), "{f}");
    }

    let o = attnlab(&["similarity", p(&a.join("cells.csv"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "1.000000");

    // Either a fitted line or a clean single-phase report.
    let fit = dir.path().join("fit.json");
    let o = attnlab(&["fit-critical", "--cells", p(&a.join("cells.csv")), "--out", p(&fit)]);
    match code(&o) {
        0 => assert!(fit.exists()),
        3 => assert!(stderr(&o).contains("boundary"), "{}", stderr(&o)),
        c => panic!("unexpected exit {c}: {}", stderr(&o)),
    }
}

#[test]
fn fit_critical_on_single_phase_grid_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("grid.json");
    // Every cell harmful: tiny signal.
    write(&m, &GRID.replace("[1.0, 6.0, 30.0]", "[0.01, 0.02]"));
    let out = dir.path().join("g");
    let o = attnlab(&["sweep", "--manifest", p(&m), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = attnlab(&["fit-critical", "--cells", p(&out.join("cells.csv"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn curves_manifest_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("curves.json");
    write(
        &m,
        r#"{
  "base": {"n": 8, "mu_norm": 8.0, "sigma_p": 1.0, "alpha": 0.0, "eta": 1.0, "sigma_v": 0.01},
  "fixed": {"d": 32, "m_k": 8, "m_v": 8, "sigma_k": 0.01, "max_iters": 200, "n_mc": 200},
  "curves": {"eta": [0.01, 0.1]},
  "repeats": 2,
  "base_seed": 1
}"#,
    );
    let out = dir.path().join("c");
    let o = attnlab(&["sweep", "--manifest", p(&m), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("runs_eta.csv").exists());
}
