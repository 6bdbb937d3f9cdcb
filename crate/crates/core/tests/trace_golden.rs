use std::fs;
use std::io::Cursor;
use std::path::PathBuf;

use vrcd_core::trace::{
    AttentionEncoding, TraceRecorder, TraceReplay, TraceSourceKind, ViolationKind, SCHEMA_VERSION,
};
use vrcd_core::*;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_trace.jsonl")
}

fn small_config() -> OracleConfig {
    OracleConfig {
        length: 12,
        num_image_tokens: 8,
        vocab_size: 32,
        num_regions: 4,
        ..OracleConfig::planted(7)
    }
}

fn header(cfg: &OracleConfig, forward_ratio: f64, window: usize) -> TraceHeader {
    TraceHeader {
        schema_version: SCHEMA_VERSION,
        run_id: "golden".into(),
        length: cfg.length,
        num_image_tokens: cfg.num_image_tokens,
        vocab_size: cfg.vocab_size,
        forward_ratio,
        attention_window: window,
        source: TraceSourceKind::Synthetic,
        conditioning_note: "synthetic oracle, seed 7".into(),
    }
}

/// Confidence-policy run on a small oracle, serialized with sparse attention.
fn regenerate() -> (Vec<u8>, RunOutput) {
    let cfg = small_config();
    let schedule = Schedule::uniform(cfg.length, 0.25).unwrap();
    let window = trace::default_attention_window(schedule.commit_sizes()[0]);
    let mut recorder = TraceRecorder::new(init_run(cfg.clone()).unwrap(), window);
    let out = run_decoding(&mut recorder, &ConfidencePolicy, &schedule, &RunOptions::default()).unwrap();
    let trace = recorder.into_trace(header(&cfg, 0.25, window));
    let mut bytes = Vec::new();
    write_trace(&mut bytes, &trace, AttentionEncoding::default()).unwrap();
    (bytes, out)
}

#[test]
fn fixture_matches_current_writer() {
    let (bytes, _) = regenerate();
    if std::env::var_os("VRCD_BLESS").is_some() {
        fs::write(fixture_path(), &bytes).unwrap();
    }
    let fixture = fs::read(fixture_path()).unwrap();
    assert_eq!(
        String::from_utf8(bytes).unwrap(),
        String::from_utf8(fixture).unwrap(),
        "rerun with VRCD_BLESS=1 if the format change is intended"
    );
}

#[test]
fn fixture_is_valid() {
    let trace = read_trace(Cursor::new(fs::read(fixture_path()).unwrap())).unwrap();
    assert_eq!(trace.header.schema_version, SCHEMA_VERSION);
    assert_eq!(trace.steps.len(), 3);
    let report = validate_trace(&trace);
    assert!(report.is_valid(), "{:?}", report.violations);
}

#[test]
fn fixture_rewrites_identically() {
    let text = fs::read_to_string(fixture_path()).unwrap();
    let trace = read_trace(Cursor::new(text.as_bytes())).unwrap();
    // attention was already thresholded and renormalized; dense output must
    // reproduce the stored weights to nine significant digits
    let mut again = Vec::new();
    write_trace(&mut again, &trace, AttentionEncoding::Sparse { threshold: Some(0.0) }).unwrap();
    let reread = read_trace(Cursor::new(again)).unwrap();
    assert_eq!(reread, trace);
}

#[test]
fn fixture_replays_capture_commits() {
    let (_, original) = regenerate();
    let trace = read_trace(Cursor::new(fs::read(fixture_path()).unwrap())).unwrap();
    let mut replay = TraceReplay::new(trace).unwrap();
    let recorded = replay.recorded_commits();
    let schedule = replay.schedule().unwrap();
    let out = run_decoding(&mut replay, &ConfidencePolicy, &schedule, &RunOptions::default()).unwrap();
    let replayed: Vec<_> = out.commits.iter().map(|c| Some(c.committed_positions.clone())).collect();
    assert_eq!(replayed, recorded);
    let first: Vec<_> = original.commits.iter().map(|c| Some(c.committed_positions.clone())).collect();
    assert_eq!(replayed, first);
}

#[test]
fn tampered_fixture_is_flagged() {
    let mut trace = read_trace(Cursor::new(fs::read(fixture_path()).unwrap())).unwrap();
    let committed = trace.steps[0].committed.clone().unwrap();
    trace.steps[1].committed.as_mut().unwrap()[0] = committed[0];
    let report = validate_trace(&trace);
    assert!(report.count(ViolationKind::CommittedNotMasked) > 0);
}
