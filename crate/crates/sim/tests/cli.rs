use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn splitcache(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitcache"))
        .current_dir(dir)
        .env_remove("SPLITCACHE_OUT_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Exit code plus the parsed single-line error.
fn failure(out: &Output) -> (i32, Value) {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let last = stderr.lines().last().unwrap_or_default();
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
    (out.status.code().unwrap(), serde_json::from_str(last).unwrap())
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn gen_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(&splitcache(dir.path(), &["gen", "--model", "qwen-like", "--tokens", "10000", "--seed", "7", "-o", name]));
    }
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 10_001);
}

#[test]
fn sweep_theta_writes_one_row_per_ratio() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&splitcache(dir.path(), &["sweep-theta", "--thetas", "0.1:1.0:0.1", "--budget", "12", "--tokens", "200"]));
    let rows = csv_rows(&stdout);
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0][..4], ["theta", "budget_per_layer", "cache_size", "tpot_mean_ms"]);
    let thetas: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(thetas, ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9", "1.0"]);
    assert_eq!(fs::read_to_string(dir.path().join("sweep_theta.csv")).unwrap(), stdout);
}

#[test]
fn compare_default_workload() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&splitcache(dir.path(), &["compare", "--modes", "cache_only,prefetch_only,moepic"]));
    let rows = csv_rows(&stdout);
    assert_eq!(rows.len(), 4);
    let tpot = |mode: &str| -> f64 { rows.iter().find(|r| r[0] == mode).unwrap()[3].parse().unwrap() };
    assert!(tpot("moepic") <= tpot("cache_only").min(tpot("prefetch_only")), "{stdout}");

    let doc: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("compare.json")).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    let runs = doc["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    assert_eq!(runs[2]["config"]["run"]["mode"], "moepic");
    assert_eq!(runs[2]["config"]["model"]["experts_per_layer"], 60);
}

#[test]
fn run_writes_report_set_and_feeds_configure() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(&splitcache(p, &["gen", "--tokens", "300", "--prompt-tokens", "16", "-o", "t.jsonl"]));
    ok(&splitcache(p, &["run", "--trace", "t.jsonl", "--out-dir", "out", "--snapshots", "--stats-out", "stats.json"]));
    let report: Value = serde_json::from_str(&fs::read_to_string(p.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["config"]["trace"]["file"], "t.jsonl");
    assert_eq!(report["config"]["trace_header"]["prompt_tokens"], 16);
    assert_eq!(report["report"]["decode_tokens"], 300);
    assert!(report["report"]["ttft"].as_f64().unwrap() > 0.0);
    let tokens = fs::read_to_string(p.join("out/tokens.csv")).unwrap();
    assert_eq!(tokens.lines().count(), 301);
    assert_eq!(fs::read_to_string(p.join("out/layers.csv")).unwrap().lines().count(), 25);
    let snaps: Value = serde_json::from_str(&fs::read_to_string(p.join("out/cache_snapshots.json")).unwrap()).unwrap();
    assert_eq!(snaps["layers"].as_array().unwrap().len(), 24);

    let stdout = ok(&splitcache(p, &["configure", "--stats", "stats.json", "--total-budget", "120"]));
    let cfg: Value = serde_json::from_str(&stdout).unwrap();
    let layers = cfg["config"]["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 24);
    let total: f64 = layers.iter().map(|l| l["budget"].as_f64().unwrap()).sum();
    assert!((total - 120.0).abs() <= 1e-9, "{total}");
}

#[test]
fn output_dir_precedence() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::write(p.join("cfg.json"), r#"{"output_dir": "from_file", "trace": {"generate": {"tokens": 20}}}"#).unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_splitcache"));
        cmd.current_dir(p).env("RUST_LOG", "warn").env_remove("SPLITCACHE_OUT_DIR");
        if let Some(v) = env {
            cmd.env("SPLITCACHE_OUT_DIR", v);
        }
        ok(&cmd.args(["gen", "--tokens", "5"]).args(extra).output().unwrap());
    };
    run(&[], Some("from_env"));
    assert!(p.join("from_env/trace.jsonl").is_file());
    run(&["--config", "cfg.json"], Some("from_env"));
    assert!(p.join("from_file/trace.jsonl").is_file());
    run(&["--config", "cfg.json", "--out-dir", "from_flag"], Some("from_env"));
    let text = fs::read_to_string(p.join("from_flag/trace.jsonl")).unwrap();
    // The file asked for 20 tokens, the flag for 5.
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn config_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let (code, err) = failure(&splitcache(p, &["run", "--trace", "missing.jsonl"]));
    assert_eq!((code, err["error"].as_str().unwrap()), (1, "config"));
    assert!(err["message"].as_str().unwrap().contains("missing.jsonl"));

    fs::write(p.join("bad.json"), r#"{"run": {"theta": 1.5}}"#).unwrap();
    let (code, err) = failure(&splitcache(p, &["--config", "bad.json", "run", "--tokens", "5"]));
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().contains("theta"), "{err}");

    ok(&splitcache(p, &["gen", "--tokens", "5", "-o", "t.jsonl"]));
    let (code, err) = failure(&splitcache(p, &["run", "--trace", "t.jsonl", "--model", "mixtral-like"]));
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().contains("does not match"), "{err}");

    let (code, _) = failure(&splitcache(p, &["run", "--no-such-flag"]));
    assert_eq!(code, 1);
    let (code, _) = failure(&splitcache(p, &["compare", "--modes", "warp_drive"]));
    assert_eq!(code, 1);

    let mut lines: Vec<String> = fs::read_to_string(p.join("t.jsonl")).unwrap().lines().map(str::to_owned).collect();
    lines[2] = lines[2].replacen("\"act\":[", "\"act\":[99,", 1);
    fs::write(p.join("t.jsonl"), lines.join("\n")).unwrap();
    let (code, err) = failure(&splitcache(p, &["run", "--trace", "t.jsonl"]));
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().starts_with("t.jsonl:3:"), "{err}");
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let (code, err) = failure(&splitcache(dir.path(), &["run", "--tokens", "5", "--out-dir", "blocker/sub"]));
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "runtime"));
}
