use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_transit-epi"));
    c.env_remove("TRANSIT_EPI_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

const SMALL: &[&str] = &[
    "--passengers", "200", "--routes", "4", "--stops-per-route", "8", "--days", "8", "--min-trips", "6",
];

fn write_synth_config(dir: &Path) -> String {
    let path = dir.join("synth.json");
    fs::write(&path, r#"{"n_passengers": 150, "n_routes": 3, "stops_per_route": 6, "days": 7, "min_trips": 6, "rng_seed": 3}"#)
        .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--beta", "not-a-number"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // Parses, but fails validation.
    let o = run(&["sweep", "--beta-grid", "0.5,0.1", "--output-dir", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ascending"));
    let o = run(&["simulate", "--beta", "1.5", "--output-dir", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = run(&["classify", "--dataset", missing.to_str().unwrap(), "--output-dir", out]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "card_id,vehicle_id\nA,v1\n").unwrap();
    let o = run(&["ingest", "--dataset", bad.to_str().unwrap(), "--output-dir", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("board_time"));
}

#[test]
fn generate_is_deterministic_and_reingests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_synth_config(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = run(&["generate", "--synth-config", &cfg, "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty(), "data goes to files only");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let out = dir.path().join("profile");
    let o = run(&["ingest", "--dataset", a.to_str().unwrap(), "--min-trips", "6", "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ingest_report.json")).unwrap()).unwrap();
    assert_eq!(report["rejected_by_reason"], serde_json::json!({}));
    assert_eq!(report["accepted"], report["total_rows"]);
    for f in ["trip_frequency.csv", "population_vs_threshold.csv", "degree_distribution.csv", "components.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn flags_override_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"synth": {"n_passengers": 5000, "days": 8, "min_trips": 6}, "min_trips": 6, "beta_grid": [0.5, 1.0], "dt_grid": [0, 15, 30]}"#).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "sweep", "--spec", spec.to_str().unwrap(), "--passengers", "150", "--routes", "3",
        "--beta-grid", "1", "--dt-grid", "0,15", "--seeds", "3", "--runs", "2",
        "--output-dir", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("sweep/manifest.json")).unwrap()).unwrap();
    assert!(manifest["population"].as_u64().unwrap() <= 150);
    assert_eq!(manifest["matrices"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["differences"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["sim"]["n_runs"], 2);
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["classify"];
    args.extend_from_slice(SMALL);
    let o = bin().args(&args).env("TRANSIT_EPI_OUT", dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("classification.csv").exists());
}

#[test]
fn simulate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let run_sim = |name: &str, dt: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["simulate", "--seeds", "5", "--runs", "3", "--dt-min", dt, "--output-dir", out.to_str().unwrap()];
        args.extend_from_slice(SMALL);
        let o = run(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out.join("flow_matrix.csv")
    };
    let base = run_sim("dt0", "0");
    let var = run_sim("dt30", "30");
    let diff = dir.path().join("diff.csv");
    let o = run(&["analyze", "diff", "--baseline", base.to_str().unwrap(), "--variant", var.to_str().unwrap(), "--out", diff.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(&diff).unwrap();
    assert!(text.starts_with("group,exp_high_long,exp_high_short,"));
    assert_eq!(text.lines().count(), 9);

    let chord = dir.path().join("chord.json");
    let o = run(&["analyze", "chord", "--matrix", base.to_str().unwrap(), "--out", chord.to_str().unwrap()]);
    assert!(o.status.success());
    let c: serde_json::Value = serde_json::from_slice(&fs::read(&chord).unwrap()).unwrap();
    assert_eq!(c["groups"].as_array().unwrap().len(), 8);
    assert_eq!(c["flows"].as_array().unwrap().len(), 64);

    // A difference matrix has negative entries; chord export refuses it
    // unless all entries happen to be non-negative.
    let o = run(&["analyze", "chord", "--matrix", diff.to_str().unwrap(), "--out", chord.to_str().unwrap()]);
    let has_negative = text.lines().skip(1).flat_map(|l| l.split(',').skip(1)).any(|v| v.parse::<f64>().unwrap() < 0.0);
    assert_eq!(o.status.code(), Some(if has_negative { 1 } else { 0 }));
}
