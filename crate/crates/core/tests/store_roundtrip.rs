mod common;

use std::path::Path;
use std::time::Instant;

use reach_core::store::*;
use reach_core::synth::{gen_session, SynthConfig};
use reach_core::Error;

#[test]
fn session_and_truth_round_trip_byte_identical() {
    let fx = common::small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    save_session(&path, &fx.frames, Some(&fx.truth)).unwrap();
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.frames, fx.frames);
    assert_eq!(ds.truth.as_ref(), Some(&fx.truth));
    assert_eq!(ds.sha256, file_sha256(&path).unwrap());

    let again = dir.path().join("t.csv");
    save_session(&again, &ds.frames, ds.truth.as_ref()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(
        std::fs::read(truth_path(&path)).unwrap(),
        std::fs::read(truth_path(&again)).unwrap()
    );
}

#[test]
fn bundle_round_trip_byte_identical() {
    let fx = common::small();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    save_bundle(&fx.bundle, &a).unwrap();
    let loaded = load_bundle(&a).unwrap();
    assert_eq!(loaded, fx.bundle);
    save_bundle(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn bundle_carries_every_model_part() {
    let text = bundle_to_string(&common::small().bundle).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["format_version", "hmm", "velocity_level", "reducer", "direction", "fsm", "provenance"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v["direction"]["stopping"]["th_r"].is_number());
}

#[test]
fn future_bundle_version_rejected() {
    let text = bundle_to_string(&common::small().bundle).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["format_version"] = serde_json::json!(BUNDLE_FORMAT_VERSION + 1);
    let err = bundle_from_str(&v.to_string()).unwrap_err();
    assert!(matches!(err, Error::UnsupportedVersion { .. }), "{err}");
}

#[test]
fn inconsistent_bundle_rejected() {
    let mut b = common::small().bundle.clone();
    b.direction.dim += 1;
    assert!(bundle_to_string(&b).is_err());
    let mut b = common::small().bundle.clone();
    b.velocity_level = [f64::NAN, 0.0];
    assert!(b.validate().is_err());
}

fn short_session() -> String {
    let frames = &common::small().frames[..20];
    session_to_string(frames)
}

fn line_of(err: Error) -> usize {
    match err {
        Error::Parse { line, .. } => line,
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn truncated_final_line_reported_with_line_number() {
    let text = short_session();
    let cut = &text[..text.len() - 10];
    assert_eq!(line_of(parse_session(Path::new("x"), cut).unwrap_err()), 22);
}

#[test]
fn non_monotone_time_rejected() {
    let text = short_session();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(5, 6);
    let text = lines.join("\n") + "\n";
    assert_eq!(line_of(parse_session(Path::new("x"), &text).unwrap_err()), 7);
}

#[test]
fn bad_header_and_field_count_rejected() {
    let text = short_session();
    assert_eq!(line_of(parse_session(Path::new("x"), &text.replacen("v1", "v2", 1)).unwrap_err()), 1);
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[4].push_str(",1");
    let text = lines.join("\n") + "\n";
    assert_eq!(line_of(parse_session(Path::new("x"), &text).unwrap_err()), 5);
}

#[test]
fn negative_emg_rejected() {
    let text = short_session();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<String> = lines[3].split(',').map(str::to_string).collect();
    fields[13] = "-0.5".into();
    lines[3] = fields.join(",");
    let text = lines.join("\n") + "\n";
    assert_eq!(line_of(parse_session(Path::new("x"), &text).unwrap_err()), 4);
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(load_dataset(Path::new("/nonexistent/x.csv")), Err(Error::Io { .. })));
}

#[test]
fn full_length_session_loads_quickly() {
    // 48,000 frames is eight minutes at 100 Hz.
    let mut cfg = SynthConfig::reference(8);
    cfg.reps = 30;
    let (frames, _) = gen_session(&cfg).unwrap();
    let frames = &frames[..48_000.min(frames.len())];
    assert!(frames.len() >= 40_000, "{} frames", frames.len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.csv");
    save_session(&path, frames, None).unwrap();
    let t0 = Instant::now();
    let ds = load_dataset(&path).unwrap();
    let took = t0.elapsed();
    assert_eq!(ds.frames.len(), frames.len());
    assert!(took.as_secs_f64() < 1.0, "load took {took:?}");
}
