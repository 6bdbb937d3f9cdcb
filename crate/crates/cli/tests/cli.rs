use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vrcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrcd"))
        .args(args)
        .env_remove("VRCD_WORKERS")
        .output()
        .expect("spawn vrcd")
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden_trace.jsonl")
}

/// Rows of a CSV file as header-keyed maps.
fn read_rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let headers = reader.headers().unwrap().clone();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            headers.iter().map(String::from).zip(r.iter().map(String::from)).collect()
        })
        .collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_oracle() -> Vec<&'static str> {
    vec!["--length", "48", "--num-image-tokens", "48", "--regions", "24"]
}

#[test]
fn validate_accepts_golden_fixture() {
    let out = vrcd(&["validate", "--trace", golden().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("ok (3 steps)"));
}

#[test]
fn validate_flags_tampered_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(golden()).unwrap();
    let bad = text.replacen("\"commit_size\":4", "\"commit_size\":5", 1);
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, bad).unwrap();
    let out = vrcd(&["validate", "--trace", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("CommitSize"));
}

#[test]
fn unreadable_input_is_an_error() {
    let out = vrcd(&["validate", "--trace", "/definitely/not/here.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vrcd(&["run", "--policy", "greedy"]);
    assert!(!out.status.success());
}

#[test]
fn compare_alpha_zero_changes_nothing_and_vrcd_does() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["compare", "-n", "6", "--alpha", "0,1.5", "--out", dir.path().to_str().unwrap()];
    args.extend(small_oracle());
    let out = vrcd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let summary = read_rows(&dir.path().join("summary.csv"));
    let by_policy = |p: &str| summary.iter().find(|r| r["policy"] == p).unwrap().clone();
    assert_eq!(by_policy("vrcd_a0")["change_rate"], "0.0");
    assert_eq!(by_policy("vrcd_a0")["changed_positions"], "0");
    let rho: f64 = by_policy("vrcd_a1.5")["change_rate"].parse().unwrap();
    assert!(rho > 0.0);
    assert!(summary.iter().all(|r| r["schema_version"] == "1"));

    let compare = read_rows(&dir.path().join("compare.csv"));
    let zero: Vec<_> = compare.iter().filter(|r| r["policy"] == "vrcd_a0").collect();
    assert_eq!(zero.len(), 12);
    assert!(zero.iter().all(|r| r["vri_delta"] == "0.0"));
}

#[test]
fn run_exports_traces_that_replay_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    let mut args = vec![
        "run",
        "--seeds",
        "3,4",
        "--no-timing",
        "--dense-attention",
        "--export-traces",
        traces.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend(small_oracle());
    let out = vrcd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(traces.join("vrcd_a1.5_seed3.jsonl").exists());

    let run_summary = read_rows(&dir.path().join("summary.csv"));
    assert_eq!(run_summary[0]["runs"], "2");
    assert_eq!(run_summary[0]["overhead_ratio"], "");
    let curves = read_rows(&dir.path().join("curves.csv"));
    assert_eq!(curves.len(), 12);
    assert_eq!(curves.last().unwrap()["mean_remaining_entropy"], "");

    let out = vrcd(&["validate", "--trace", traces.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));

    let replay_dir = dir.path().join("replay");
    let out = vrcd(&["replay", "--trace", traces.to_str().unwrap(), "--out", replay_dir.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("commits matching the recording: 24/24 steps"));
    let replay_summary = read_rows(&replay_dir.join("summary.csv"));
    // attention is stored to nine significant digits
    let vri = |rows: &[std::collections::HashMap<String, String>]| rows[0]["mean_vri_micro"].parse::<f64>().unwrap();
    assert!((vri(&replay_summary) - vri(&run_summary)).abs() < 1e-8);
    assert_eq!(replay_summary[0]["change_rate"], run_summary[0]["change_rate"]);
}

#[test]
fn run_reports_overhead_for_vrcd() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "-n", "1", "--out", dir.path().to_str().unwrap()];
    args.extend(small_oracle());
    let out = vrcd(&args);
    assert!(out.status.success());
    let ratio: f64 = read_rows(&dir.path().join("summary.csv"))[0]["overhead_ratio"].parse().unwrap();
    assert!(ratio > 0.0);
}

#[test]
fn bench_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "bench",
        "-n",
        "1",
        "--fr",
        "0.25,0.5",
        "--warmup",
        "0",
        "--repetitions",
        "1",
        "--pair-windows",
        "4,8",
        "--pair-tokens",
        "16",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend(small_oracle());
    let out = vrcd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bench = read_rows(&dir.path().join("bench.csv"));
    assert_eq!(bench.len(), 2);
    assert_eq!(bench[1]["commit_size"], "2");
    assert_eq!(read_rows(&dir.path().join("pair_cost.csv")).len(), 2);

    let out = vrcd(&["bench", "--policy", "entropy", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn worker_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "-n", "2", "--policy", "margin", "--out", dir.path().to_str().unwrap()];
    args.extend(small_oracle());
    let out = Command::new(env!("CARGO_BIN_EXE_vrcd"))
        .args(&args)
        .env("VRCD_WORKERS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_vrcd"))
        .args(&args)
        .env("VRCD_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
