use std::path::Path;
use std::process::{Command, Output};

use rho_core::bounds::beta_n_lambda;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rho-bayes"));
    c.env_remove("RHO_BAYES_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&read(p)).unwrap()
}

const FAST: [&str; 4] = ["--iters", "10", "--mc-draws", "8"];

#[test]
fn minimal_experiment_has_one_row_per_estimator() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["experiment", "--trials", "1", "--eps", "0", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read(&dir.path().join("risk_table.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "scenario,estimator,epsilon,posterior_risk,rmse,n_trials,ci_halfwidth");
    assert_eq!(lines.len(), 4);
    for (line, est) in lines[1..].iter().zip(["mle", "bayes", "rho"]) {
        assert!(line.starts_with(&format!("gaussian_location,{est},0,")), "{line}");
    }
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "experiment");
    assert_eq!(m["config"]["tau"], "0.5");
    assert_eq!(m["config"]["n"], "200");
}

#[test]
fn grid_row_count_and_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |out: &Path| -> Vec<String> {
        let mut v: Vec<String> = [
            "experiment", "--scenario", "gaussian_location", "--n", "200", "--tau", "0.5", "--eps",
            "0,0.05,0.08,0.10", "--trials", "2", "--seed", "42",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        v.extend(FAST.iter().map(|s| s.to_string()));
        v.push("--out".into());
        v.push(out.display().to_string());
        v
    };
    assert!(bin().args(args(&a)).status().unwrap().success());
    assert!(bin().args(args(&b)).arg("--jobs").arg("3").status().unwrap().success());
    let ta = read(&a.join("risk_table.csv"));
    assert_eq!(ta.lines().count(), 1 + 4 * 3);
    assert_eq!(ta, read(&b.join("risk_table.csv")));
    assert_eq!(read(&a.join("trials.csv")), read(&b.join("trials.csv")));
}

#[test]
fn replay_reproduces_outputs() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let mut args = vec!["experiment", "--scenario", "poisson_intensity", "--trials", "2", "--eps", "0,0.1"];
    args.extend(FAST);
    args.extend(["--out", a.to_str().unwrap()]);
    assert!(run(&args).status.success());
    let replayed = dir.path().join("r");
    let o = run(&["replay", a.join("manifest.json").to_str().unwrap(), "--out", replayed.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&a.join("manifest.json"));
    for f in m["outputs"].as_array().unwrap() {
        let f = f.as_str().unwrap();
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(replayed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_config_exits_2_naming_the_key() {
    let o = run(&["experiment", "--tau=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`tau`"), "{}", stderr(&o));
    let o = run(&["experiment", "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`bogus`"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# quick run\nscenario = uniform_scale\ntrials = 1\neps = 0.1\niters = 5\nmc_draws = 4\nseed = 7\n").unwrap();
    let out = dir.path().join("o");
    let o = run(&["experiment", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["config"]["scenario"], "uniform_scale");
    assert_eq!(m["config"]["seed"], "9");
    assert_eq!(m["master_seed"], 9);
    assert_eq!(m["config"]["mc_theta_draws"], "4");
}

#[test]
fn output_directory_from_environment() {
    let dir = TempDir::new().unwrap();
    let o = bin()
        .args(["experiment", "--trials", "1", "--eps", "0"])
        .args(FAST)
        .env("RHO_BAYES_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("risk_table.csv").exists());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn fit_gaussian_is_close_to_sample_mean() {
    let dir = TempDir::new().unwrap();
    let o = run(&["fit", "--scenario", "gaussian_location", "--n", "200", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let f = json(&dir.path().join("fit.json"));
    for key in ["phi_mean", "phi_chol", "nu_mean", "nu_logvar", "rho_estimate", "objective_trace", "seed"] {
        assert!(!f[key].is_null(), "{key}");
    }
    let rho = f["rho_estimate"][0].as_f64().unwrap();
    let mean = f["sample_mean"].as_f64().unwrap();
    assert!((rho - mean).abs() < 0.15, "{rho} vs {mean}");
    assert_eq!(f["objective_trace"].as_array().unwrap().len(), 200);
}

#[test]
fn fit_uniform_readout_is_lognormal_mean() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["fit", "--scenario", "uniform_scale", "--out", dir.path().to_str().unwrap()];
    args.extend(FAST);
    assert!(run(&args).status.success());
    let f = json(&dir.path().join("fit.json"));
    let m = f["phi_mean"][0].as_f64().unwrap();
    let s = f["phi_chol"][0][0].as_f64().unwrap();
    let rho = f["rho_estimate"][0].as_f64().unwrap();
    assert!((rho - (m + 0.5 * s * s).exp()).abs() <= 1e-12);
}

#[test]
fn fit_reads_observation_file() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("x.txt");
    std::fs::write(&data, "# observations\n0.5\n-0.25\n1.0\n0.0\n\n0.75\n").unwrap();
    let mut args = vec!["fit", "--data", data.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    args.extend(FAST);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let f = json(&dir.path().join("fit.json"));
    assert_eq!(f["n"], 5);
    assert_eq!(f["sample_mean"].as_f64().unwrap(), 0.4);
}

#[test]
fn fit_missing_data_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = run(&["fit", "--data", "/definitely/not/here.txt", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_divergence_exits_3_with_trace() {
    let dir = TempDir::new().unwrap();
    let o = run(&["fit", "--iters", "5", "--set", "lr=inf", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("diverged"), "{err}");
    assert!(err.contains("last objective trace: ["), "{err}");
}

#[test]
fn bound_report_fields() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "bound", "--n", "200", "--tau", "0.125", "--delta", "0.5", "--trials", "2", "--iters", "20", "--n-draws", "500",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = json(&dir.path().join("bound.json"));
    assert_eq!(b["beta"].as_f64().unwrap(), beta_n_lambda(200, 25.0).unwrap());
    let comp = b["log_delta_over_lambda"].as_f64().unwrap();
    assert!((comp - 2f64.ln() * 8.0 / 200.0).abs() <= 1e-12);
    assert!(b["note"].as_str().unwrap().contains("g(1/4)"));
    assert_eq!(b["trials"].as_array().unwrap().len(), 2);
    let r = &b["trials"][0]["report"];
    assert!(r["lhs_estimate"].is_f64() && r["rhs_estimate"].is_f64());
    assert!(b["coefficients"]["competitor_coef"].as_f64().unwrap() <= 2.0 / 3.0);
}

#[test]
fn bound_lambda_flag_sets_tau() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "bound", "--n", "80", "--lambda", "10", "--trials", "1", "--iters", "5", "--n-draws", "100", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["config"]["tau"], "0.125");
}

#[test]
fn bound_unsupported_scenario_exits_2() {
    let o = run(&["bound", "--scenario", "correlated_regression", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selfcheck_passes_and_fault_is_named() {
    let o = run(&["selfcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["selfcheck", "--inject-fault", "flip-psi-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("antisymmetry"));
}

#[test]
fn birge_experiment_writes_json() {
    let dir = TempDir::new().unwrap();
    let o = run(&["experiment", "--scenario", "birge_mle", "--set", "n_mc=200", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = json(&dir.path().join("birge.json"));
    assert_eq!(b["n"], 100);
    assert!(b["projection_hellinger"].as_f64().unwrap() < 1.25 / 100.0);
    assert_eq!(read(&dir.path().join("risk_table.csv")).lines().count(), 2);
}

#[test]
fn csv_regression_end_to_end() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("d.csv");
    let mut text = String::from("x1,x2,y\n");
    for i in 0..60 {
        let x1 = (i as f64 * 0.7).sin();
        let x2 = (i as f64 * 0.3).cos();
        text.push_str(&format!("{x1},{x2},{}\n", 1.0 + 2.0 * x1 - x2 + 0.1 * ((i * 7 % 11) as f64 - 5.0) / 5.0));
    }
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("o");
    let mut args = vec![
        "experiment", "--scenario", "csv_regression", "--csv", csv.to_str().unwrap(), "--target", "y", "--trials", "1",
        "--eps", "0.1", "--out", out.to_str().unwrap(),
    ];
    args.extend(FAST);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read(&out.join("risk_table.csv"));
    assert_eq!(table.lines().count(), 4);
    assert!(out.join("prediction_rmse.csv").exists());

    std::fs::write(&csv, "x1,y\n1,2\n3,oops\n").unwrap();
    let o = run(&["experiment", "--scenario", "csv_regression", "--csv", csv.to_str().unwrap(), "--target", "y", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("row 3") && err.contains("y"), "{err}");
}
