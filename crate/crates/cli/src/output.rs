use std::fmt::Write as _;
use std::path::Path;

use rho_core::experiments::{RiskTable, Scenario};
use rho_core::saddle::{FitResult, SaddleProblem};
use serde::Serialize;

use crate::commands::CliError;

/// Column order of `risk_table.csv`; an `errors` column is appended only
/// when some trial failed.
pub const RISK_COLUMNS: [&str; 7] = [
    "scenario",
    "estimator",
    "epsilon",
    "posterior_risk",
    "rmse",
    "n_trials",
    "ci_halfwidth",
];

fn write(dir: &Path, name: &str, contents: &str) -> Result<String, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::data(&path, e))?;
    Ok(name.to_string())
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(&dir.join(name), e))?;
    text.push('\n');
    write(dir, name, &text)
}

pub fn risk_table_csv(table: &RiskTable) -> String {
    let with_errors = table.rows.iter().any(|r| r.errors > 0);
    let mut s = RISK_COLUMNS.join(",");
    if with_errors {
        s.push_str(",errors");
    }
    s.push('\n');
    for r in &table.rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.scenario.as_str(),
            r.estimator.as_str(),
            r.epsilon,
            r.posterior_risk,
            r.rmse,
            r.n_trials,
            r.ci_halfwidth
        );
        if with_errors {
            let _ = write!(s, ",{}", r.errors);
        }
        s.push('\n');
    }
    s
}

pub fn write_risk_table(dir: &Path, table: &RiskTable) -> Result<String, CliError> {
    write(dir, "risk_table.csv", &risk_table_csv(table))
}

pub fn write_prediction(dir: &Path, table: &RiskTable) -> Result<String, CliError> {
    let mut s = String::from("scenario,estimator,epsilon,prediction_rmse,n_trials,ci_halfwidth\n");
    for r in &table.prediction {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.scenario.as_str(),
            r.estimator.as_str(),
            r.epsilon,
            r.prediction_rmse,
            r.n_trials,
            r.ci_halfwidth
        );
    }
    write(dir, "prediction_rmse.csv", &s)
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// One row per trial and estimator; vector estimates are `;`-separated.
pub fn write_trials(dir: &Path, table: &RiskTable) -> Result<String, CliError> {
    let mut s = String::from("epsilon_index,epsilon,trial,seed,n_outliers,estimator,value,sq_error,error\n");
    for t in &table.trials {
        if let Some(err) = &t.error {
            let _ = writeln!(
                s,
                "{},{},{},{},{},,,,{}",
                t.epsilon_index,
                t.epsilon,
                t.trial,
                t.seed,
                t.n_outliers,
                csv_field(err)
            );
            continue;
        }
        for e in &t.estimates {
            let value: Vec<String> = e.value.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},",
                t.epsilon_index,
                t.epsilon,
                t.trial,
                t.seed,
                t.n_outliers,
                e.estimator.as_str(),
                value.join(";"),
                e.sq_error
            );
        }
    }
    write(dir, "trials.csv", &s)
}

/// Contents of `fit.json`.
#[derive(Clone, Debug, Serialize)]
pub struct FitSummary {
    pub scenario: String,
    pub seed: u64,
    pub n: usize,
    pub lambda: f64,
    pub phi_mean: Vec<f64>,
    /// Lower-triangular Cholesky factor, row by row.
    pub phi_chol: Vec<Vec<f64>>,
    pub nu_mean: Vec<f64>,
    pub nu_logvar: Vec<f64>,
    /// Target mean, mapped through `E exp(.)` for log-scale models.
    pub rho_estimate: Vec<f64>,
    /// Mean of the observations (i.i.d. scenarios).
    pub sample_mean: Option<f64>,
    pub objective_trace: Vec<f64>,
    pub stepsize: Option<f64>,
}

impl FitSummary {
    pub fn new(scenario: Scenario, seed: u64, prob: &SaddleProblem, fit: &FitResult, rho: Vec<f64>) -> Self {
        let st = &fit.state;
        let l = &st.phi.chol_l;
        Self {
            scenario: scenario.as_str().to_string(),
            seed,
            n: prob.sample.n(),
            lambda: prob.lambda,
            phi_mean: st.phi.m.iter().copied().collect(),
            phi_chol: (0..l.nrows()).map(|i| (0..l.ncols()).map(|j| l[(i, j)]).collect()).collect(),
            nu_mean: st.nu.m_prime.iter().copied().collect(),
            nu_logvar: st.nu.s.iter().copied().collect(),
            rho_estimate: rho,
            sample_mean: scenario.is_iid().then(|| prob.sample.mean()),
            objective_trace: st.trace.clone(),
            stepsize: fit.stepsize,
        }
    }
}
