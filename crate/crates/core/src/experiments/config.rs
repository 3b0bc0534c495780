use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saddle::{Optimizer, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    GaussianLocation,
    PoissonIntensity,
    UniformScale,
    FourierRegression,
    CorrelatedRegression,
    CsvRegression,
    BirgeMle,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::GaussianLocation,
        Scenario::PoissonIntensity,
        Scenario::UniformScale,
        Scenario::FourierRegression,
        Scenario::CorrelatedRegression,
        Scenario::CsvRegression,
        Scenario::BirgeMle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::GaussianLocation => "gaussian_location",
            Scenario::PoissonIntensity => "poisson_intensity",
            Scenario::UniformScale => "uniform_scale",
            Scenario::FourierRegression => "fourier_regression",
            Scenario::CorrelatedRegression => "correlated_regression",
            Scenario::CsvRegression => "csv_regression",
            Scenario::BirgeMle => "birge_mle",
        }
    }

    /// One of the three contaminated one-parameter families.
    pub fn is_iid(&self) -> bool {
        matches!(
            self,
            Scenario::GaussianLocation | Scenario::PoissonIntensity | Scenario::UniformScale
        )
    }

    pub fn is_regression(&self) -> bool {
        matches!(
            self,
            Scenario::FourierRegression | Scenario::CorrelatedRegression | Scenario::CsvRegression
        )
    }

    /// Default sample size.
    pub fn default_n(&self) -> usize {
        match self {
            Scenario::CorrelatedRegression | Scenario::BirgeMle => 100,
            _ => 200,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Scenario::ALL.iter().map(|x| x.as_str()).collect();
                format!("unknown scenario {s:?} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Mle,
    Bayes,
    Rho,
    Ols,
    Huber,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::Bayes => "bayes",
            Estimator::Rho => "rho",
            Estimator::Ols => "ols",
            Estimator::Huber => "huber",
        }
    }

    /// Estimators reported for a scenario, in table order.
    pub fn for_scenario(s: Scenario) -> &'static [Estimator] {
        match s {
            Scenario::GaussianLocation | Scenario::PoissonIntensity | Scenario::UniformScale => {
                &[Estimator::Mle, Estimator::Bayes, Estimator::Rho]
            }
            Scenario::FourierRegression | Scenario::CorrelatedRegression => {
                &[Estimator::Ols, Estimator::Bayes, Estimator::Huber, Estimator::Rho]
            }
            Scenario::CsvRegression => &[Estimator::Ols, Estimator::Huber, Estimator::Rho],
            Scenario::BirgeMle => &[Estimator::Mle],
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub epsilon_grid: Vec<f64>,
    /// Temperature factor, `lambda = tau * n`.
    pub tau: f64,
    pub trials: usize,
    pub master_seed: u64,
    /// Solver settings; the Monte-Carlo seed is replaced per trial.
    pub optimizer: OptimizerConfig,
    pub n_iters: usize,
    /// Variance of the isotropic `N(0, v I)` priors (target and competitor).
    pub prior_var: f64,
    /// Worker threads; 0 uses every core. Does not affect results.
    pub jobs: usize,
    pub csv: Option<CsvSource>,
    /// Replications for the MLE-failure demonstration.
    pub n_mc: usize,
    pub huber_gammas: Vec<f64>,
    pub cv_folds: usize,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            n: scenario.default_n(),
            epsilon_grid: vec![0.0, 0.05, 0.08, 0.10],
            tau: 0.5,
            trials: 200,
            master_seed: 42,
            optimizer: OptimizerConfig::default(),
            n_iters: 200,
            prior_var: 4.0,
            jobs: 1,
            csv: None,
            n_mc: 2000,
            huber_gammas: vec![1.0, 1.345, 1.5, 2.0, 2.5, 3.0],
            cv_folds: 5,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.tau * self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config {
            key: key.to_string(),
            message,
        });
        let min_n = if self.scenario == Scenario::BirgeMle { 4 } else { 1 };
        if self.n < min_n {
            return bad("n", format!("must be at least {min_n}, got {}", self.n));
        }
        if self.epsilon_grid.is_empty() {
            return bad("eps", "grid is empty".into());
        }
        if let Some(e) = self.epsilon_grid.iter().find(|e| !(**e >= 0.0 && **e < 1.0)) {
            return bad("eps", format!("{e} outside [0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if self.trials == 0 {
            return bad("trials", "must be at least 1".into());
        }
        if self.n_iters == 0 {
            return bad("iters", "must be at least 1".into());
        }
        if self.optimizer.mc.n_theta_draws < 2 || self.optimizer.mc.n_theta_prime_draws < 2 {
            return bad("mc_draws", "must be at least 2".into());
        }
        if !(self.optimizer.adam.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.optimizer.adam.lr));
        }
        if let Some(s) = self.optimizer.stepsize {
            if !(s > 0.0 && s.is_finite()) {
                return bad("stepsize", format!("must be positive, got {s}"));
            }
        }
        if !(self.prior_var > 0.0 && self.prior_var.is_finite()) {
            return bad("prior_var", format!("must be positive, got {}", self.prior_var));
        }
        if self.scenario == Scenario::CsvRegression && self.csv.is_none() {
            return bad("csv_path", "required for csv_regression".into());
        }
        if self.n_mc < 2 {
            return bad("n_mc", "must be at least 2".into());
        }
        if self.huber_gammas.is_empty() || self.huber_gammas.iter().any(|g| !(*g > 0.0)) {
            return bad("huber_gammas", "must be a non-empty list of positive values".into());
        }
        if self.cv_folds < 2 {
            return bad("cv_folds", "must be at least 2".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scenario" => {
                let s: Scenario = parse(key, v)?;
                if s != self.scenario {
                    let keep = self.clone();
                    *self = ExperimentConfig::new(s);
                    // carry explicit settings that are scenario independent
                    self.master_seed = keep.master_seed;
                    self.jobs = keep.jobs;
                }
            }
            "n" => self.n = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "eps" => self.epsilon_grid = parse_list(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "seed" => self.master_seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "iters" => self.n_iters = parse(key, v)?,
            "prior_var" => self.prior_var = parse(key, v)?,
            "n_mc" => self.n_mc = parse(key, v)?,
            "huber_gammas" => self.huber_gammas = parse_list(key, v)?,
            "cv_folds" => self.cv_folds = parse(key, v)?,
            "csv_path" => {
                let target = self.csv.as_ref().map(|c| c.target.clone()).unwrap_or_default();
                self.csv = Some(CsvSource {
                    path: PathBuf::from(v),
                    target,
                });
            }
            "csv_target" => {
                let path = self.csv.as_ref().map(|c| c.path.clone()).unwrap_or_default();
                self.csv = Some(CsvSource {
                    path,
                    target: v.to_string(),
                });
            }
            _ => return set_optimizer(&mut self.optimizer, key, v),
        }
        Ok(())
    }

    /// Flat `key = value` rendering with every setting materialized.
    pub fn to_kv(&self) -> String {
        let mut out = vec![
            kv("scenario", self.scenario.as_str()),
            kv("n", self.n),
            kv("tau", self.tau),
            kv("eps", join(&self.epsilon_grid)),
            kv("trials", self.trials),
            kv("seed", self.master_seed),
            kv("jobs", self.jobs),
            kv("iters", self.n_iters),
            kv("prior_var", self.prior_var),
            kv("n_mc", self.n_mc),
            kv("huber_gammas", join(&self.huber_gammas)),
            kv("cv_folds", self.cv_folds),
        ];
        if let Some(c) = &self.csv {
            out.push(kv("csv_path", c.path.display()));
            out.push(kv("csv_target", &c.target));
        }
        out.extend(optimizer_kv(&self.optimizer));
        out.join("\n") + "\n"
    }

    /// Parses a `key = value` file on top of the defaults of its scenario
    /// (`scenario` may appear anywhere; default gaussian_location).
    pub fn from_kv(text: &str) -> Result<Self> {
        let entries = parse_kv(text)?;
        let scenario = match entries.iter().find(|(k, _)| k == "scenario") {
            Some((k, v)) => parse(k, v)?,
            None => Scenario::GaussianLocation,
        };
        let mut cfg = ExperimentConfig::new(scenario);
        for (k, v) in &entries {
            if k != "scenario" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

/// Settings for the oracle-bound coverage study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub scenario: Scenario,
    pub n: usize,
    /// `lambda = tau * n`; the inequality is stated for `tau = 1/8`.
    pub tau: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub master_seed: u64,
    pub optimizer: OptimizerConfig,
    pub n_iters: usize,
    pub prior_var: f64,
    /// Parameter draws for each expected Hellinger risk.
    pub n_draws: usize,
    pub jobs: usize,
}

impl BoundConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            n: 200,
            tau: 0.125,
            delta: 0.05,
            epsilon: 0.0,
            trials: 200,
            master_seed: 42,
            optimizer: OptimizerConfig::default(),
            n_iters: 200,
            prior_var: 4.0,
            n_draws: 10_000,
            jobs: 1,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.tau * self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config {
            key: key.to_string(),
            message,
        });
        if !self.scenario.is_iid() {
            return bad("scenario", format!("no Hellinger oracle for {}", self.scenario));
        }
        if self.n == 0 {
            return bad("n", "must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", format!("must lie in (0, 1), got {}", self.delta));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return bad("eps", format!("{} outside [0, 1)", self.epsilon));
        }
        if self.trials == 0 {
            return bad("trials", "must be at least 1".into());
        }
        if self.n_iters == 0 {
            return bad("iters", "must be at least 1".into());
        }
        if self.optimizer.mc.n_theta_draws < 2 || self.optimizer.mc.n_theta_prime_draws < 2 {
            return bad("mc_draws", "must be at least 2".into());
        }
        if self.n_draws < 2 {
            return bad("n_draws", "must be at least 2".into());
        }
        if !(self.prior_var > 0.0 && self.prior_var.is_finite()) {
            return bad("prior_var", format!("must be positive, got {}", self.prior_var));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scenario" => self.scenario = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda" => {
                let l: f64 = parse(key, v)?;
                self.tau = l / self.n.max(1) as f64;
            }
            "delta" => self.delta = parse(key, v)?,
            "eps" => self.epsilon = parse(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "seed" => self.master_seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "iters" => self.n_iters = parse(key, v)?,
            "prior_var" => self.prior_var = parse(key, v)?,
            "n_draws" => self.n_draws = parse(key, v)?,
            _ => return set_optimizer(&mut self.optimizer, key, v),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut out = vec![
            kv("scenario", self.scenario.as_str()),
            kv("n", self.n),
            kv("tau", self.tau),
            kv("delta", self.delta),
            kv("eps", self.epsilon),
            kv("trials", self.trials),
            kv("seed", self.master_seed),
            kv("jobs", self.jobs),
            kv("iters", self.n_iters),
            kv("prior_var", self.prior_var),
            kv("n_draws", self.n_draws),
        ];
        out.extend(optimizer_kv(&self.optimizer));
        out.join("\n") + "\n"
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let entries = parse_kv(text)?;
        let mut cfg = BoundConfig::new(Scenario::GaussianLocation);
        // n before lambda so that lambda converts with the right n
        for (k, v) in entries.iter().filter(|(k, _)| k == "n") {
            cfg.set(k, v)?;
        }
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn set_optimizer(opt: &mut OptimizerConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "optimizer" => {
            opt.method = match v {
                "adam" => Optimizer::Adam,
                "extragradient" => Optimizer::Extragradient,
                _ => {
                    return Err(Error::Config {
                        key: key.into(),
                        message: format!("expected adam or extragradient, got {v:?}"),
                    })
                }
            }
        }
        "mc_draws" => {
            let d: usize = parse(key, v)?;
            opt.mc.n_theta_draws = d;
            opt.mc.n_theta_prime_draws = d;
        }
        "mc_theta_draws" => opt.mc.n_theta_draws = parse(key, v)?,
        "mc_theta_prime_draws" => opt.mc.n_theta_prime_draws = parse(key, v)?,
        "crn" => opt.mc.common_random_numbers = parse(key, v)?,
        "lr" => opt.adam.lr = parse(key, v)?,
        "beta1" => opt.adam.beta1 = parse(key, v)?,
        "beta2" => opt.adam.beta2 = parse(key, v)?,
        "adam_eps" => opt.adam.eps = parse(key, v)?,
        "stepsize" => {
            opt.stepsize = if v == "auto" { None } else { Some(parse(key, v)?) };
        }
        _ => {
            return Err(Error::Config {
                key: key.into(),
                message: "unknown key".into(),
            })
        }
    }
    Ok(())
}

fn optimizer_kv(opt: &OptimizerConfig) -> Vec<String> {
    vec![
        kv(
            "optimizer",
            match opt.method {
                Optimizer::Adam => "adam",
                Optimizer::Extragradient => "extragradient",
            },
        ),
        kv("mc_theta_draws", opt.mc.n_theta_draws),
        kv("mc_theta_prime_draws", opt.mc.n_theta_prime_draws),
        kv("crn", opt.mc.common_random_numbers),
        kv("lr", opt.adam.lr),
        kv("beta1", opt.adam.beta1),
        kv("beta2", opt.adam.beta2),
        kv("adam_eps", opt.adam.eps),
        kv(
            "stepsize",
            opt.stepsize.map(|s| s.to_string()).unwrap_or_else(|| "auto".into()),
        ),
    ]
}

fn kv(key: &str, value: impl fmt::Display) -> String {
    format!("{key} = {value}")
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse {v:?}: {e}"),
    })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s.trim())).collect()
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            key: line.to_string(),
            message: format!("line {} is not of the form key = value", i + 1),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        for s in Scenario::ALL {
            let mut c = ExperimentConfig::new(s);
            c.epsilon_grid = vec![0.0, 0.1];
            c.optimizer.stepsize = Some(0.01);
            c.optimizer.method = Optimizer::Extragradient;
            if s == Scenario::CsvRegression {
                c.csv = Some(CsvSource {
                    path: "data/x.csv".into(),
                    target: "y".into(),
                });
            }
            let back = ExperimentConfig::from_kv(&c.to_kv()).unwrap();
            assert_eq!(back, c);
        }
        let b = BoundConfig::new(Scenario::UniformScale);
        assert_eq!(BoundConfig::from_kv(&b.to_kv()).unwrap(), b);
    }

    #[test]
    fn errors_name_the_key() {
        match ExperimentConfig::from_kv("n = abc") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "n"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_kv("bogus = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        let mut c = ExperimentConfig::new(Scenario::GaussianLocation);
        c.epsilon_grid = vec![1.0];
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "eps"),
            other => panic!("{other:?}"),
        }
        assert!(BoundConfig::new(Scenario::FourierRegression).validate().is_err());
    }

    #[test]
    fn scenario_defaults() {
        assert_eq!(ExperimentConfig::new(Scenario::CorrelatedRegression).n, 100);
        assert_eq!(ExperimentConfig::new(Scenario::GaussianLocation).n, 200);
        let c = ExperimentConfig::from_kv("# comment\nscenario = uniform_scale\ntau=0.25\n").unwrap();
        assert_eq!((c.scenario, c.tau), (Scenario::UniformScale, 0.25));
        let b = BoundConfig::from_kv("lambda = 50\nn = 400").unwrap();
        assert_eq!(b.tau, 0.125);
    }
}
