use rho_core::experiments::{
    birge_hellinger_sq, birge_mle_demo, gen_contaminated, parse_kv, run_trials, Estimator, ExperimentConfig, Scenario,
};

fn quick(scenario: Scenario) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(scenario);
    for (k, v) in [("trials", "2"), ("eps", "0,0.1"), ("iters", "20"), ("mc_draws", "8")] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn risk_table_shape_and_determinism() {
    let mut cfg = quick(Scenario::GaussianLocation);
    let a = run_trials(&cfg).unwrap();
    cfg.jobs = 3;
    let b = run_trials(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2 * Estimator::for_scenario(Scenario::GaussianLocation).len());
    assert_eq!(a.total_errors(), 0);
    for r in &a.rows {
        assert!(r.posterior_risk.is_finite() && r.rmse >= 0.0);
        assert_eq!(r.n_trials, 2);
    }
}

#[test]
fn regression_scenarios_report_prediction() {
    let t = run_trials(&quick(Scenario::CorrelatedRegression)).unwrap();
    assert!(!t.prediction.is_empty());
    assert!(t.rows.iter().any(|r| r.estimator == Estimator::Rho));
}

#[test]
fn config_round_trips_through_kv() {
    let cfg = quick(Scenario::PoissonIntensity);
    let back = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
    assert_eq!(back.to_kv(), cfg.to_kv());
    assert!(parse_kv("no equals sign").is_err());
    let mut bad = ExperimentConfig::new(Scenario::GaussianLocation);
    assert!(bad.set("unknown_key", "1").is_err());
    assert!(bad.set("n", "abc").is_err());
}

#[test]
fn contamination_fraction_and_reproducibility() {
    let a = gen_contaminated(Scenario::GaussianLocation, 1000, 0.1, 5).unwrap();
    let b = gen_contaminated(Scenario::GaussianLocation, 1000, 0.1, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n(), 1000);
    let c = gen_contaminated(Scenario::GaussianLocation, 1000, 0.1, 6).unwrap();
    assert_ne!(a, c);
}

#[test]
fn birge_mle_is_inconsistent() {
    let b = birge_mle_demo(100, 500, 1).unwrap();
    assert!(b.projection_hellinger < 0.0125);
    assert!(b.mle_hellinger_risk > 0.4);
    assert!((birge_hellinger_sq(100, 0.1) - b.projection_hellinger).abs() < 1e-15);
}
