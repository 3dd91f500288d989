//! Command-line behaviour: exit codes, error reports and the `all` run.

use std::path::Path;
use std::process::{Command, Output};

fn spidereval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spidereval"))
        .args(args)
        .env_remove("SPIDEREVAL_SEED")
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spidereval(&["--out", s(tmp.path()), "synth"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["field"], "seed");
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_spidereval"))
        .args(["--out", s(tmp.path()), "synth", "--n-images", "20", "--n-raters", "6"])
        .env("SPIDEREVAL_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn unknown_config_field_names_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seeed": 3}"#).unwrap();
    let out = spidereval(&["--config", s(&cfg), "--out", s(tmp.path()), "qc"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("seeed"));
}

#[test]
fn malformed_ratings_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let ratings = tmp.path().join("r.csv");
    std::fs::write(&ratings, "participant_id,image_id,rating,trial\np1,img1,abc,1\n").unwrap();
    let out = spidereval(&["--out", s(tmp.path()), "qc", "--ratings", s(&ratings)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"], "parse");
}

#[test]
fn prop_ci_rejects_impossible_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spidereval(&["--out", s(tmp.path()), "prop-ci", "--successes", "7", "--n", "5"]);
    assert_eq!(out.status.code(), Some(1));
    let ok = spidereval(&["--out", s(tmp.path()), "prop-ci", "--successes", "65", "--n", "500"]);
    assert!(ok.status.success());
    let ci: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("prop_ci.json")).unwrap()).unwrap();
    assert!((ci["low"].as_f64().unwrap() - 0.1033).abs() < 5e-4);
}

#[test]
fn all_on_synthetic_data_writes_every_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{"synth": {"n_images": 100, "n_raters": 30, "heatmap_images": 15},
            "trials": 5, "icc_sizes": [5, 10], "icc_reps": 10, "bootstrap": 100}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = spidereval(&["--config", s(&cfg), "--seed", "3", "--out", s(&out_dir), "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "qc_report.csv",
        "qc_summary.json",
        "participant_split.json",
        "cv_plan.json",
        "leakage_audit.json",
        "predictions.csv",
        "search_log.jsonl",
        "metrics.csv",
        "icc_summary.csv",
        "icc_boxplot.svg",
        "overlap.csv",
        "ttest.json",
        "omnibus.csv",
        "descriptives.csv",
        "posthoc.csv",
        "run_manifest.json",
    ] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "all");
    assert_eq!(manifest["inputs"]["ratings"]["path"], "$OUT/synth/ratings.csv");
    assert_eq!(manifest["inputs"]["ratings"]["sha256"].as_str().unwrap().len(), 64);

    // Predictions written by one run feed a metrics-only run unchanged.
    let again = tmp.path().join("again");
    let out = spidereval(&[
        "--seed",
        "3",
        "--out",
        s(&again),
        "metrics",
        "--ratings",
        s(&out_dir.join("synth/ratings.csv")),
        "--predictions",
        s(&out_dir.join("predictions.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(out_dir.join("metrics.csv")).unwrap(),
        std::fs::read(again.join("metrics.csv")).unwrap()
    );
}
