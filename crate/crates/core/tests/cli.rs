use std::fs;
use std::process::{Command, Output};

use ltv_slam::logio;
use ltv_slam::runner::Metrics;
use ltv_slam::sim::{self, Simulator};
use ltv_slam::vmeas::SensorCase;

fn slam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slam")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn lists_scenarios() {
    let o = slam(&["scenarios", "list"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for name in sim::SCENARIO_NAMES {
        assert!(text.lines().any(|l| l == name), "{name} missing");
    }
}

#[test]
fn shown_scenario_runs_from_file() {
    let o = slam(&["scenarios", "show", "circle-2d"]);
    assert_eq!(code(&o), 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sc.json");
    fs::write(&path, &o.stdout).unwrap();
    let out = dir.path().join("out");
    let o = slam(&["run", "--mode", "global", "--scenario", path.to_str().unwrap(), "--duration", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Metrics = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.steps, 100);
}

#[test]
fn noise_report_prints_json() {
    let o = slam(&["noise-report", "--sigma-theta", "5", "--r", "4", "--samples", "10000"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let bias = v["analytic_radial_bias"].as_f64().unwrap();
    assert!((bias - 0.0152).abs() < 1e-4);
    assert!((v["mean_radial"].as_f64().unwrap() - bias).abs() < 0.005);
}

#[test]
fn config_errors_exit_two() {
    for args in [
        &["run", "--mode", "nope"][..],
        &["run", "--mode", "local", "--case", "9"],
        &["run", "--mode", "dunk", "--case", "pinhole"],
        &["run", "--mode", "local", "--scenario", "/no/such/file.json"],
        &["run", "--mode", "local", "--dt", "0"],
        &["noise-report", "--sigma-theta", "5", "--r", "4", "--samples", "10"],
        &["frobnicate"],
    ] {
        let o = slam(args);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn divergence_exits_three() {
    // Euler steps of 50 s amplify the rotating relative position every step.
    let o = slam(&["run", "--mode", "local", "--case", "1", "--dt", "50", "--duration", "20000", "--integrator", "euler"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = slam(&["run", "--mode", "coop-full", "--duration", "1", "--seed", "7", "--trace-every", "10", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        files.push((fs::read(out.join("trace.csv")).unwrap(), fs::read(out.join("metrics.json")).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let other = dir.path().join("c");
    slam(&["run", "--mode", "coop-full", "--duration", "1", "--seed", "8", "--trace-every", "10", "--out", other.to_str().unwrap()]);
    assert_ne!(fs::read(other.join("trace.csv")).unwrap(), files[0].0);
}

#[test]
fn runs_from_a_recorded_log() {
    let sc = sim::scenario_circle_2d();
    let frames: Vec<_> = Simulator::new(sc.clone(), SensorCase::BearingOnly).unwrap().take(200).collect();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("drive.csv");
    logio::write_path(&log, &logio::frames_to_rows(&sc, &frames)).unwrap();
    let out = dir.path().join("out");
    let o = slam(&["run", "--mode", "dunk", "--case", "1", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Metrics = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m.steps, 200);
    assert!(m.truth && m.vehicle_ate.is_some());
}
