use std::fs;
use std::path::Path;
use std::process::Command;

use transynth::cli::run_cli;
use transynth::output::read_metrics;
use transynth_core::estimators::{bounds_search, estimate_aipw, fit_synthesis, synthesis_nuisance_spec};
use transynth_core::simulation::{generate_dataset, repetition_rng, Scenario};
use transynth_core::{AipwVariant, Dataset, SynthesisSpec};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["transynth"];
    argv.extend_from_slice(args);
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_dataset(d: &Dataset, path: &Path) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["R", "A", "V", "W", "Y"]).unwrap();
    let cell = |x: f64| if x.is_nan() { String::new() } else { format!("{x}") };
    let wcol = d.column("W").unwrap();
    for i in 0..d.n() {
        w.write_record([cell(d.r()[i]), cell(d.a()[i]), cell(d.v()[i]), cell(wcol[i]), cell(d.y()[i])])
            .unwrap();
    }
    w.flush().unwrap();
}

fn simulated(dir: &Path, seed: u64) -> Dataset {
    let mut rng = repetition_rng(seed, 0);
    let d = generate_dataset(Scenario::Nonlinear, 600, 600, &mut rng).unwrap();
    write_dataset(&d, &dir.join("data.csv"));
    d
}

#[test]
fn help_and_usage_codes() {
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["--version"]).0, 0);
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 1);
    assert_eq!(err.lines().count(), 1);
    assert_eq!(run(&["analyze"]).0, 1);
}

#[test]
fn naive_on_action_outcome() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "R,A,V,W,Y\n0,1,1,0,1\n0,0,2,0,0\n0,1,3,1,1\n0,0,4,1,0\n1,,5,0,\n").unwrap();
    fs::write(dir.path().join("a.toml"), "data = \"d.csv\"\nestimator = \"naive\"\n").unwrap();
    let cfg = dir.path().join("a.toml");
    let (code, out, _) = run(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().nth(1).unwrap(), "naive,wald,1,0,1,1");
}

#[test]
fn analyze_reproduces_library_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let d = simulated(dir.path(), 3);
    fs::write(
        dir.path().join("a.toml"),
        "data = \"data.csv\"\npositive_upper = 300\nestimator = \"extrapolation\"\ninference = \"wald\"\n",
    )
    .unwrap();
    let cfg = dir.path().join("a.toml");
    let out_path = dir.path().join("r.csv");
    let (code, _, err) = run(&["analyze", "--config", cfg.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let lib = estimate_aipw(&d, AipwVariant::Extrapolation, &AipwVariant::Extrapolation.default_spec()).unwrap();
    let text = fs::read_to_string(&out_path).unwrap();
    let psi: f64 = text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((psi - lib.psi()).abs() <= 1e-9 * lib.psi().abs());
    let (_, out, _) = run(&["analyze", "--config", cfg.to_str().unwrap(), "--format", "text"]);
    assert!(out.contains("estimator = \"extrapolation\""));
}

#[test]
fn bounds_match_library_search() {
    let dir = tempfile::tempdir().unwrap();
    let d = simulated(dir.path(), 5);
    fs::write(
        dir.path().join("a.toml"),
        "data = \"data.csv\"\npositive_upper = 300\nestimator = \"synthesis-cace\"\nlambda = [\"set(-20,150)\", \"set(-20,100)\"]\n",
    )
    .unwrap();
    let cfg = dir.path().join("a.toml");
    let (code, out, err) = run(&["analyze", "--config", cfg.to_str().unwrap(), "--bounds"]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6);
    let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &SynthesisSpec::cace()).unwrap();
    let lib = bounds_search(&fit, &[vec![-20.0, 150.0], vec![-20.0, 100.0]]).unwrap();
    let summary: Vec<f64> = lines[5].split(',').skip(4).map(|s| s.parse().unwrap()).collect();
    let transynth_core::Estimate::Bounds { lower, upper } = lib.estimate else { panic!() };
    for (got, want) in summary.iter().zip([lower, upper, lib.ci.0, lib.ci.1]) {
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.toml"),
        "scenario = 2\nn1 = 300\nn0 = 300\nreps = 3\nbootstrap_iterations = 100\nestimators = [\"restricted-population\", \"synthesis-cace\"]\nmath_variants = [\"normal\", \"uniform_null\"]\ntruth_m = 100000\n",
    )
    .unwrap();
    let cfg = dir.path().join("s.toml");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let (code, _, err) = run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "42", "--out", p.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let rows = read_metrics(ta.as_slice()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.scenario == 2 && r.reps_used == 3));
}

#[test]
fn truth_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("truth.csv");
    let args = ["truth", "--scenario", "1", "--m", "100000", "--seed", "1", "--cache", cache.to_str().unwrap()];
    let (code, first, _) = run(&args);
    assert_eq!(code, 0);
    let (_, second, _) = run(&args);
    assert_eq!(first, second);
    let psi: f64 = first.trim().parse().unwrap();
    assert!((psi - 111.3).abs() < 1.0);
    assert_eq!(run(&["truth", "--scenario", "7"]).0, 2);
}

#[test]
fn report_files() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path(), 9);
    fs::write(
        dir.path().join("a.toml"),
        "data = \"data.csv\"\npositive_upper = 300\nestimator = \"synthesis-cace\"\nlambda = [\"-0.2\", \"-0.3\"]\ncurve_points = 50\ndensity_points = 40\n",
    )
    .unwrap();
    let out_dir = dir.path().join("report");
    let cfg = dir.path().join("a.toml");
    let (code, out, err) = run(&["report", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3);
    let est = fs::read_to_string(out_dir.join("estimates.csv")).unwrap();
    assert_eq!(est.lines().count(), 1 + 5);
    let curve = fs::read_to_string(out_dir.join("cace_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 51);
    let dens = fs::read_to_string(out_dir.join("densities.csv")).unwrap();
    assert_eq!(dens.lines().count(), 81);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let (code, _, err) = run(&["analyze", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:") && err.lines().count() == 1);

    simulated(dir.path(), 11);
    fs::write(
        dir.path().join("a.toml"),
        "data = \"data.csv\"\npositive_upper = 0.001\nestimator = \"synthesis-cace\"\nlambda = [\"0\", \"0\"]\n",
    )
    .unwrap();
    let cfg = dir.path().join("a.toml");
    let (code, _, err) = run(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn binary_exit_status() {
    let bin = env!("CARGO_BIN_EXE_transynth");
    let status = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
    let status = Command::new(bin).arg("analyze").output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = Command::new(bin).args(["truth", "--scenario", "9"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}
