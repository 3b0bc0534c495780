//! Simulation scenarios, baselines and the replication harness.

mod baselines;
mod birge;
mod config;
mod data;

pub use baselines::{bayes_regression, huber_fit, huber_irls, iid_baselines, ols, HuberFit};
pub use birge::{birge_density, birge_hellinger_sq, birge_mle_demo, BirgeResult};
pub use config::{parse_kv, BoundConfig, CsvSource, Estimator, ExperimentConfig, Scenario};
pub use data::{
    contaminated_noise, correlated_beta_star, fourier_design, fourier_truth, gen_contaminated, gen_contaminated_labeled,
    gen_correlated_regression, gen_fourier_regression, ingest_csv_regression, read_csv_table, split_and_contaminate,
    standardize_columns, toeplitz, CsvTable, Pareto, RegressionData,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    default_sd_grid, oracle_rhs_estimate, reference_candidates, BoundReport, ClosedFormOracle, CorollaryCoefficients,
    HellingerOracle, MixtureOracle, G_QUARTER_NOTE,
};
use crate::error::{invalid, Error, Result};
use crate::models::{DensityModel, NoiseDensity, RegressionDesign, Sample};
use crate::rng;
use crate::saddle::{fit_rho_posterior, FitResult, OptimizerConfig, SaddleProblem};
use crate::special::{mad, mean_var};
use crate::variational::{lognormal_mean, GaussianPrior};

const MAD_TO_SD: f64 = 1.482_602_218_505_602;

/// True parameter on the natural scale for the i.i.d. scenarios.
pub fn iid_truth(s: Scenario) -> Option<f64> {
    match s {
        Scenario::GaussianLocation => Some(0.0),
        Scenario::PoissonIntensity => Some(3.0),
        Scenario::UniformScale => Some(1.0),
        _ => None,
    }
}

/// Model for an i.i.d. scenario; Poisson and uniform are parameterized on
/// the log scale.
pub fn iid_model(s: Scenario) -> Result<DensityModel> {
    match s {
        Scenario::GaussianLocation => Ok(DensityModel::GaussianLocation),
        Scenario::PoissonIntensity => Ok(DensityModel::PoissonIntensity),
        Scenario::UniformScale => Ok(DensityModel::UniformScale),
        other => Err(invalid(format!("{other} is not an i.i.d. scenario"))),
    }
}

/// Fits the variational target and competitor with `N(0, prior_var I)`
/// priors on both.
pub fn fit_with_priors(
    model: DensityModel,
    sample: Sample,
    prior_var: f64,
    lambda: f64,
    optimizer: &OptimizerConfig,
    n_iters: usize,
    seed: u64,
) -> Result<(SaddleProblem, FitResult)> {
    let d = model.dim();
    let zero = vec![0.0; d];
    let prob = SaddleProblem::new(
        model,
        sample,
        GaussianPrior::isotropic(&zero, prior_var)?,
        GaussianPrior::isotropic(&zero, prior_var)?,
        lambda,
    )?;
    let mut opt = *optimizer;
    opt.mc.seed = seed;
    let fit = fit_rho_posterior(&prob, None, &opt, n_iters).map_err(|f| f.error)?;
    Ok((prob, fit))
}

/// Point estimate read off the fitted target: its mean, mapped through
/// `E exp(.)` for log-scale models.
pub fn rho_readout(model: &DensityModel, fit: &FitResult) -> Result<Vec<f64>> {
    let phi = &fit.state.phi;
    match model {
        DensityModel::PoissonIntensity | DensityModel::UniformScale => {
            let s = phi.chol_l[(0, 0)];
            Ok(vec![lognormal_mean(phi.m[0], s * s)?])
        }
        _ => Ok(phi.m.iter().copied().collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: Estimator,
    pub value: Vec<f64>,
    /// `(estimate - truth)^2`, summed over coordinates; for CSV data the
    /// test-set mean squared prediction error.
    pub sq_error: f64,
    /// Mean squared prediction error (regression only).
    pub prediction_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub epsilon_index: usize,
    pub epsilon: f64,
    pub trial: usize,
    pub seed: u64,
    pub n_outliers: usize,
    pub estimates: Vec<EstimateRecord>,
    pub error: Option<String>,
}

impl TrialOutcome {
    pub fn estimate(&self, e: Estimator) -> Option<&EstimateRecord> {
        self.estimates.iter().find(|r| r.estimator == e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub scenario: Scenario,
    pub estimator: Estimator,
    pub epsilon: f64,
    pub posterior_risk: f64,
    pub rmse: f64,
    pub n_trials: usize,
    pub ci_halfwidth: f64,
    /// Trials skipped because some estimator failed.
    pub errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub scenario: Scenario,
    pub estimator: Estimator,
    pub epsilon: f64,
    pub prediction_rmse: f64,
    pub n_trials: usize,
    pub ci_halfwidth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub rows: Vec<RiskRow>,
    pub prediction: Vec<PredictionRow>,
    pub trials: Vec<TrialOutcome>,
}

impl RiskTable {
    pub fn row(&self, estimator: Estimator, epsilon: f64) -> Option<&RiskRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.epsilon == epsilon)
    }

    pub fn total_errors(&self) -> usize {
        self.trials.iter().filter(|t| t.error.is_some()).count()
    }
}

/// 95% normal-approximation half width of a mean.
fn ci95(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let (_, var) = mean_var(values);
    1.96 * (var / values.len() as f64).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn predictions(design: &DMatrix<f64>, beta: &[f64]) -> Vec<f64> {
    (design * DVector::from_column_slice(beta)).iter().copied().collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b) / a.len() as f64
}

/// Seed of trial `trial` at grid position `eps_index`.
pub fn trial_seed(master: u64, eps_index: usize, trial: usize) -> u64 {
    rng::derive_seed(master, &[eps_index as u64, trial as u64])
}

/// Regenerates the regression data of a trial.
pub fn regression_data(cfg: &ExperimentConfig, epsilon: f64, seed: u64) -> Result<RegressionData> {
    let data_seed = rng::derive_seed(seed, &[0]);
    match cfg.scenario {
        Scenario::FourierRegression => gen_fourier_regression(cfg.n, 6, epsilon, Pareto::FOURIER, data_seed),
        Scenario::CorrelatedRegression => gen_correlated_regression(cfg.n, 10, 0.7, epsilon, Pareto::CORRELATED, data_seed),
        Scenario::CsvRegression => {
            let src = cfg.csv.as_ref().ok_or_else(|| invalid("csv source missing"))?;
            ingest_csv_regression(&src.path, &src.target, epsilon, data_seed)
        }
        other => Err(invalid(format!("{other} is not a regression scenario"))),
    }
}

/// Noise scale of the candidate Gaussian density: 1 for the synthetic
/// designs, a MAD estimate from Huber residuals for ingested data.
fn noise_sd_for(scenario: Scenario, x: &DMatrix<f64>, y: &[f64], huber_beta: &[f64]) -> f64 {
    if scenario != Scenario::CsvRegression {
        return 1.0;
    }
    let res: Vec<f64> = y.iter().zip(predictions(x, huber_beta)).map(|(a, b)| a - b).collect();
    match mad(&res) {
        Some(m) if m > 0.0 => MAD_TO_SD * m,
        _ => 1.0,
    }
}

/// The saddle problem a single fit solves: data generated from `seed` at
/// contamination `epsilon` as in a trial, or `sample` when given (i.i.d.
/// scenarios only).
pub fn build_problem(cfg: &ExperimentConfig, epsilon: f64, seed: u64, sample: Option<Sample>) -> Result<SaddleProblem> {
    let d_prior = |d: usize| GaussianPrior::isotropic(&vec![0.0; d], cfg.prior_var);
    if cfg.scenario.is_iid() {
        let model = iid_model(cfg.scenario)?;
        let sample = match sample {
            Some(s) => s,
            None => gen_contaminated(cfg.scenario, cfg.n, epsilon, rng::derive_seed(seed, &[0]))?,
        };
        let lambda = cfg.tau * sample.n() as f64;
        return SaddleProblem::new(model, sample, d_prior(1)?, d_prior(1)?, lambda);
    }
    if sample.is_some() {
        return Err(invalid("explicit samples are supported for i.i.d. scenarios only"));
    }
    if !cfg.scenario.is_regression() {
        return Err(invalid(format!("{} has no variational fit", cfg.scenario)));
    }
    let data = regression_data(cfg, epsilon, seed)?;
    let (x, y) = (&data.design, &data.responses);
    let noise_sd = if cfg.scenario == Scenario::CsvRegression {
        let huber = huber_fit(x, y, &cfg.huber_gammas, cfg.cv_folds, rng::derive_seed(seed, &[2]))?;
        noise_sd_for(cfg.scenario, x, y, &huber.beta)
    } else {
        1.0
    };
    let p = x.ncols();
    let design = RegressionDesign::new(x.clone(), NoiseDensity::Gaussian { sd: noise_sd })?;
    SaddleProblem::new(
        DensityModel::FixedDesignRegression(design),
        Sample::new(y.clone())?,
        d_prior(p)?,
        d_prior(p)?,
        cfg.tau * y.len() as f64,
    )
}

fn run_iid_trial(cfg: &ExperimentConfig, epsilon: f64, seed: u64) -> Result<(usize, Vec<EstimateRecord>)> {
    let truth = iid_truth(cfg.scenario).expect("i.i.d. scenario");
    let (sample, flags) = gen_contaminated_labeled(cfg.scenario, cfg.n, epsilon, rng::derive_seed(seed, &[0]))?;
    let mut out: Vec<EstimateRecord> = iid_baselines(cfg.scenario, &sample)?
        .into_iter()
        .map(|(e, v)| EstimateRecord {
            estimator: e,
            value: vec![v],
            sq_error: (v - truth).powi(2),
            prediction_mse: None,
        })
        .collect();
    let model = iid_model(cfg.scenario)?;
    let (prob, fit) = fit_with_priors(
        model,
        sample,
        cfg.prior_var,
        cfg.lambda(),
        &cfg.optimizer,
        cfg.n_iters,
        rng::derive_seed(seed, &[1]),
    )?;
    let v = rho_readout(&prob.model, &fit)?;
    out.push(EstimateRecord {
        estimator: Estimator::Rho,
        sq_error: (v[0] - truth).powi(2),
        value: v,
        prediction_mse: None,
    });
    Ok((flags.iter().filter(|b| **b).count(), out))
}

fn run_regression_trial(cfg: &ExperimentConfig, epsilon: f64, seed: u64) -> Result<(usize, Vec<EstimateRecord>)> {
    let data = regression_data(cfg, epsilon, seed)?;
    let x = &data.design;
    let y = &data.responses;
    let huber = huber_fit(x, y, &cfg.huber_gammas, cfg.cv_folds, rng::derive_seed(seed, &[2]))?;
    let noise_sd = noise_sd_for(cfg.scenario, x, y, &huber.beta);
    let mut est: Vec<(Estimator, Vec<f64>)> = Vec::new();
    for &e in Estimator::for_scenario(cfg.scenario) {
        let beta = match e {
            Estimator::Ols => ols(x, y)?,
            Estimator::Bayes => bayes_regression(x, y, cfg.prior_var, noise_sd * noise_sd)?,
            Estimator::Huber => huber.beta.clone(),
            Estimator::Rho => {
                let design = RegressionDesign::new(x.clone(), NoiseDensity::Gaussian { sd: noise_sd })?;
                let (prob, fit) = fit_with_priors(
                    DensityModel::FixedDesignRegression(design),
                    Sample::new(y.clone())?,
                    cfg.prior_var,
                    cfg.lambda(),
                    &cfg.optimizer,
                    cfg.n_iters,
                    rng::derive_seed(seed, &[1]),
                )?;
                rho_readout(&prob.model, &fit)?
            }
            Estimator::Mle => unreachable!("regression tables report ols"),
        };
        est.push((e, beta));
    }
    let records = est
        .into_iter()
        .map(|(e, beta)| {
            let (sq_error, pmse) = match (&data.beta_star, &data.test) {
                (Some(bs), _) => (sq_dist(&beta, bs), mse(&predictions(x, &beta), &predictions(x, bs))),
                (None, Some((xt, yt))) => {
                    let m = mse(&predictions(xt, &beta), yt);
                    (m, m)
                }
                (None, None) => (f64::NAN, f64::NAN),
            };
            EstimateRecord {
                estimator: e,
                value: beta,
                sq_error,
                prediction_mse: Some(pmse),
            }
        })
        .collect();
    Ok((data.outliers.iter().filter(|b| **b).count(), records))
}

/// Runs one trial; errors are captured in the outcome.
pub fn run_trial(cfg: &ExperimentConfig, eps_index: usize, trial: usize) -> TrialOutcome {
    let epsilon = cfg.epsilon_grid[eps_index];
    let seed = trial_seed(cfg.master_seed, eps_index, trial);
    let res = if cfg.scenario.is_iid() {
        run_iid_trial(cfg, epsilon, seed)
    } else {
        run_regression_trial(cfg, epsilon, seed)
    };
    let (n_outliers, estimates, error) = match res {
        Ok((k, e)) => (k, e, None),
        Err(e) => {
            log::warn!("trial {trial} at eps {epsilon} failed: {e}");
            (0, Vec::new(), Some(e.to_string()))
        }
    };
    TrialOutcome {
        epsilon_index: eps_index,
        epsilon,
        trial,
        seed,
        n_outliers,
        estimates,
        error,
    }
}

pub(crate) fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Aggregates trial outcomes into risk rows, in grid then estimator order.
pub fn summarize(cfg: &ExperimentConfig, trials: Vec<TrialOutcome>) -> RiskTable {
    let mut rows = Vec::new();
    let mut prediction = Vec::new();
    for (k, &eps) in cfg.epsilon_grid.iter().enumerate() {
        let at: Vec<&TrialOutcome> = trials.iter().filter(|t| t.epsilon_index == k).collect();
        let errors = at.iter().filter(|t| t.error.is_some()).count();
        for &e in Estimator::for_scenario(cfg.scenario) {
            let recs: Vec<&EstimateRecord> = at.iter().filter(|t| t.error.is_none()).filter_map(|t| t.estimate(e)).collect();
            let sq: Vec<f64> = recs.iter().map(|r| r.sq_error).collect();
            let risk = if sq.is_empty() { f64::NAN } else { sq.iter().sum::<f64>() / sq.len() as f64 };
            rows.push(RiskRow {
                scenario: cfg.scenario,
                estimator: e,
                epsilon: eps,
                posterior_risk: risk,
                rmse: risk.sqrt(),
                n_trials: sq.len(),
                ci_halfwidth: ci95(&sq),
                errors,
            });
            let pm: Vec<f64> = recs.iter().filter_map(|r| r.prediction_mse).collect();
            if !pm.is_empty() {
                prediction.push(PredictionRow {
                    scenario: cfg.scenario,
                    estimator: e,
                    epsilon: eps,
                    prediction_rmse: (pm.iter().sum::<f64>() / pm.len() as f64).sqrt(),
                    n_trials: pm.len(),
                    ci_halfwidth: ci95(&pm),
                });
            }
        }
    }
    RiskTable {
        rows,
        prediction,
        trials,
    }
}

/// Replicates the configured scenario `trials` times at every grid value.
/// Results do not depend on `jobs`.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<RiskTable> {
    cfg.validate()?;
    if cfg.scenario == Scenario::BirgeMle {
        let b = birge_mle_demo(cfg.n, cfg.n_mc, cfg.master_seed)?;
        return Ok(birge_table(cfg, &b));
    }
    if cfg.scenario == Scenario::CsvRegression {
        // surface parse errors once instead of per trial
        let src = cfg.csv.as_ref().expect("validated");
        read_csv_table(&src.path, &src.target)?;
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.epsilon_grid.len())
        .flat_map(|k| (0..cfg.trials).map(move |t| (k, t)))
        .collect();
    let outcomes = with_pool(cfg.jobs, || {
        jobs.par_iter().map(|&(k, t)| run_trial(cfg, k, t)).collect::<Vec<_>>()
    })?;
    Ok(summarize(cfg, outcomes))
}

/// Risk table for the MLE-failure demonstration: one `mle` row whose risk
/// is the expected squared Hellinger distance.
pub fn birge_table(cfg: &ExperimentConfig, b: &BirgeResult) -> RiskTable {
    let eps = 2.0 / cfg.n as f64;
    RiskTable {
        rows: vec![RiskRow {
            scenario: Scenario::BirgeMle,
            estimator: Estimator::Mle,
            epsilon: eps,
            posterior_risk: b.mle_hellinger_risk,
            rmse: b.mle_hellinger_risk.sqrt(),
            n_trials: b.n_mc,
            ci_halfwidth: 1.96 * b.mle_std_error,
            errors: 0,
        }],
        prediction: Vec::new(),
        trials: Vec::new(),
    }
}

fn oracle_for(cfg: &BoundConfig) -> Result<Box<dyn HellingerOracle>> {
    let model = iid_model(cfg.scenario)?;
    let (clean, out) = match cfg.scenario {
        Scenario::GaussianLocation => (0.0, 8.0),
        Scenario::PoissonIntensity => (3f64.ln(), 30f64.ln()),
        Scenario::UniformScale => (0.0, 102f64.ln()),
        _ => unreachable!(),
    };
    if cfg.epsilon == 0.0 {
        Ok(Box::new(ClosedFormOracle::new(model, vec![clean])?))
    } else if cfg.scenario == Scenario::UniformScale {
        Err(Error::NoClosedForm(
            "contaminated uniform (outlier law U(101, 102) is not a family member)".into(),
        ))
    } else {
        Ok(Box::new(MixtureOracle::new(model, vec![clean], vec![out], cfg.epsilon)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: usize,
    pub seed: u64,
    pub report: Option<BoundReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub delta: f64,
    pub n: usize,
    pub lambda: f64,
    pub beta: f64,
    pub coefficients: CorollaryCoefficients,
    /// Fraction of successful trials where the inequality held.
    pub coverage: f64,
    pub n_holds: usize,
    pub n_ok: usize,
    pub n_errors: usize,
    /// `max(1 - 2 delta, 0)`.
    pub nominal: f64,
    /// Binomial standard deviation of the coverage at the nominal level.
    pub sigma: f64,
    pub log_delta_over_lambda: f64,
    pub note: String,
    pub trials: Vec<BoundTrial>,
}

/// One coverage trial: fit on fresh data, then evaluate both sides.
pub fn run_bound_trial(cfg: &BoundConfig, trial: usize) -> BoundTrial {
    let seed = rng::derive_seed(cfg.master_seed, &[trial as u64]);
    let res = (|| -> Result<BoundReport> {
        let oracle = oracle_for(cfg)?;
        let sample = gen_contaminated(cfg.scenario, cfg.n, cfg.epsilon, rng::derive_seed(seed, &[0]))?;
        let (prob, fit) = fit_with_priors(
            iid_model(cfg.scenario)?,
            sample,
            cfg.prior_var,
            cfg.lambda(),
            &cfg.optimizer,
            cfg.n_iters,
            rng::derive_seed(seed, &[1]),
        )?;
        let cands = reference_candidates(&prob, oracle.as_ref(), &default_sd_grid(), 2000, rng::derive_seed(seed, &[2]))?;
        oracle_rhs_estimate(
            &prob,
            &fit.state.phi,
            &cands,
            cfg.delta,
            oracle.as_ref(),
            cfg.n_draws,
            rng::derive_seed(seed, &[3]),
        )
    })();
    match res {
        Ok(r) => BoundTrial {
            trial,
            seed,
            report: Some(r),
            error: None,
        },
        Err(e) => BoundTrial {
            trial,
            seed,
            report: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn run_bound_trials(cfg: &BoundConfig) -> Result<BoundSummary> {
    cfg.validate()?;
    oracle_for(cfg)?;
    let trials = with_pool(cfg.jobs, || {
        (0..cfg.trials).into_par_iter().map(|t| run_bound_trial(cfg, t)).collect::<Vec<_>>()
    })?;
    let n_ok = trials.iter().filter(|t| t.report.is_some()).count();
    let n_holds = trials.iter().filter(|t| t.report.as_ref().is_some_and(|r| r.holds)).count();
    let nominal = (1.0 - 2.0 * cfg.delta).max(0.0);
    let coefficients = crate::bounds::corollary_coefficients(cfg.n, cfg.lambda())?;
    Ok(BoundSummary {
        delta: cfg.delta,
        n: cfg.n,
        lambda: cfg.lambda(),
        beta: coefficients.beta,
        coefficients,
        coverage: if n_ok > 0 { n_holds as f64 / n_ok as f64 } else { f64::NAN },
        n_holds,
        n_ok,
        n_errors: trials.len() - n_ok,
        nominal,
        sigma: (nominal * (1.0 - nominal) / n_ok.max(1) as f64).sqrt(),
        log_delta_over_lambda: -cfg.delta.ln() / cfg.lambda(),
        note: G_QUARTER_NOTE.to_string(),
        trials,
    })
}
