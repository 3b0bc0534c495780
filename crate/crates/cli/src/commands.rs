use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rho_core::experiments::{
    birge_mle_demo, birge_table, build_problem, parse_kv, rho_readout, run_bound_trials, run_trials, BoundConfig,
    ExperimentConfig, Scenario,
};
use rho_core::models::Sample;
use rho_core::rng;
use rho_core::saddle::fit_rho_posterior;
use rho_core::selfcheck::{run_selfcheck, Fault, SelfCheckConfig};
use thiserror::Error;

use crate::manifest::Manifest;
use crate::output;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "RHO_BAYES_OUT";
const DEFAULT_OUT: &str = "rho_out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Core(#[from] rho_core::Error),

    #[error("{path}: {message}")]
    Data { path: String, message: String },

    #[error("{error}")]
    Diverged { error: String, trace: Vec<f64> },

    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn data(path: &Path, message: impl std::fmt::Display) -> Self {
        CliError::Data {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        use rho_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Data { .. } => 2,
            CliError::Diverged { .. } => 3,
            CliError::SelfCheck(_) => 1,
            CliError::Core(e) => match e {
                E::Config { .. }
                | E::Csv { .. }
                | E::Io(_)
                | E::InvalidInput(_)
                | E::NoClosedForm(_)
                | E::OutsideDomain(_)
                | E::Empty(_)
                | E::DimensionMismatch { .. } => 2,
                E::Diverged { .. } => 3,
                _ => 1,
            },
        }
    }

    pub fn detail(&self) -> Option<String> {
        match self {
            CliError::Diverged { trace, .. } => Some(format!(
                "last objective trace: {}",
                serde_json::to_string(trace).unwrap_or_default()
            )),
            _ => None,
        }
    }
}

/// A resolved command line: the command and its `key = value` settings in
/// application order (config file, then flags).
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: String,
    pub entries: Vec<(String, String)>,
    pub out: Option<PathBuf>,
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
    Ok(parse_kv(&text)?)
}

fn out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn scenario_of(entries: &[(String, String)]) -> Result<Scenario, CliError> {
    match entries.iter().rev().find(|(k, _)| k == "scenario") {
        Some((_, v)) => Scenario::from_str(v).map_err(|_| CliError::config("scenario", format!("unknown scenario {v:?}"))),
        None => Ok(Scenario::GaussianLocation),
    }
}

pub fn experiment_config(entries: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::new(scenario_of(entries)?);
    for (k, v) in entries.iter().filter(|(k, _)| k != "scenario") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn bound_config(entries: &[(String, String)]) -> Result<BoundConfig, CliError> {
    let mut cfg = BoundConfig::new(scenario_of(entries)?);
    // n first so that a lambda setting converts with the final n
    for (k, v) in entries.iter().filter(|(k, _)| k == "n") {
        cfg.set(k, v)?;
    }
    for (k, v) in entries.iter().filter(|(k, _)| k != "scenario") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_observations(path: &Path) -> Result<Sample, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path, e))?;
    let mut xs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let x: f64 = line
            .parse()
            .map_err(|e| CliError::data(path, format!("line {}: cannot parse {line:?}: {e}", i + 1)))?;
        xs.push(x);
    }
    Sample::new(xs).map_err(|e| CliError::data(path, e))
}

struct Outcome {
    config_text: String,
    seed: u64,
    outputs: Vec<String>,
}

fn run_experiment(entries: &[(String, String)], dir: &Path) -> Result<Outcome, CliError> {
    let cfg = experiment_config(entries)?;
    let mut outputs = Vec::new();
    if cfg.scenario == Scenario::BirgeMle {
        let b = birge_mle_demo(cfg.n, cfg.n_mc, cfg.master_seed)?;
        let table = birge_table(&cfg, &b);
        outputs.push(output::write_risk_table(dir, &table)?);
        outputs.push(output::write_json(dir, "birge.json", &b)?);
    } else {
        let table = run_trials(&cfg)?;
        outputs.push(output::write_risk_table(dir, &table)?);
        outputs.push(output::write_trials(dir, &table)?);
        if cfg.scenario.is_regression() {
            outputs.push(output::write_prediction(dir, &table)?);
        }
        if table.total_errors() > 0 {
            log::warn!("{} trials failed; see the errors column", table.total_errors());
        }
    }
    Ok(Outcome {
        config_text: cfg.to_kv(),
        seed: cfg.master_seed,
        outputs,
    })
}

fn run_fit(entries: &[(String, String)], dir: &Path) -> Result<Outcome, CliError> {
    // a single fit defaults to clean data
    let mut all = vec![("eps".to_string(), "0".to_string())];
    all.extend(entries.iter().cloned());
    let data = all.iter().rev().find(|(k, _)| k == "data").map(|(_, v)| PathBuf::from(v));
    let rest: Vec<(String, String)> = all.into_iter().filter(|(k, _)| k != "data").collect();
    let cfg = experiment_config(&rest)?;
    if cfg.epsilon_grid.len() != 1 {
        return Err(CliError::config("eps", "fit takes a single contamination level"));
    }
    let sample = match &data {
        Some(p) => {
            if !cfg.scenario.is_iid() {
                return Err(CliError::config("data", "observation files are supported for i.i.d. scenarios only"));
            }
            Some(read_observations(p)?)
        }
        None => None,
    };
    let seed = cfg.master_seed;
    let prob = build_problem(&cfg, cfg.epsilon_grid[0], seed, sample)?;
    let mut opt = cfg.optimizer;
    opt.mc.seed = rng::derive_seed(seed, &[1]);
    let fit = fit_rho_posterior(&prob, None, &opt, cfg.n_iters).map_err(|f| match f.error {
        rho_core::Error::Diverged { .. } => CliError::Diverged {
            error: f.error.to_string(),
            trace: f.last_valid.trace.clone(),
        },
        e => CliError::Core(e),
    })?;
    let rho = rho_readout(&prob.model, &fit)?;
    let summary = output::FitSummary::new(cfg.scenario, seed, &prob, &fit, rho);
    let mut config_text = cfg.to_kv();
    if let Some(p) = &data {
        config_text.push_str(&format!("data = {}\n", p.display()));
    }
    Ok(Outcome {
        config_text,
        seed,
        outputs: vec![output::write_json(dir, "fit.json", &summary)?],
    })
}

fn run_bound(entries: &[(String, String)], dir: &Path) -> Result<Outcome, CliError> {
    let cfg = bound_config(entries)?;
    let summary = run_bound_trials(&cfg)?;
    println!(
        "coverage {:.4} ({} of {} trials; nominal {:.2}), beta = {}",
        summary.coverage, summary.n_holds, summary.n_ok, summary.nominal, summary.beta
    );
    Ok(Outcome {
        config_text: cfg.to_kv(),
        seed: cfg.master_seed,
        outputs: vec![output::write_json(dir, "bound.json", &summary)?],
    })
}

pub fn execute(inv: &Invocation) -> Result<(), CliError> {
    let start = Instant::now();
    let dir = out_dir(inv.out.clone());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::data(&dir, e))?;
    let outcome = match inv.command.as_str() {
        "experiment" => run_experiment(&inv.entries, &dir)?,
        "fit" => run_fit(&inv.entries, &dir)?,
        "bound" => run_bound(&inv.entries, &dir)?,
        other => return Err(CliError::config("command", format!("cannot run {other:?}"))),
    };
    let config: BTreeMap<String, String> = parse_kv(&outcome.config_text)?.into_iter().collect();
    let manifest = Manifest {
        command: inv.command.clone(),
        config,
        master_seed: outcome.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outcome.outputs.clone(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    output::write_json(&dir, "manifest.json", &manifest)?;
    for o in &outcome.outputs {
        println!("wrote {}", dir.join(o).display());
    }
    Ok(())
}

pub fn replay(manifest_path: &Path, out: Option<PathBuf>, jobs: Option<String>) -> Result<(), CliError> {
    let m = Manifest::read(manifest_path)?;
    let mut entries: Vec<(String, String)> = m.config.into_iter().collect();
    if let Some(j) = jobs {
        entries.push(("jobs".into(), j));
    }
    let default_dir = manifest_path.parent().unwrap_or(Path::new(".")).join("replay");
    let out = out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or(default_dir);
    execute(&Invocation {
        command: m.command,
        entries,
        out: Some(out),
    })
}

pub fn selfcheck(seed: Option<u64>, fault: Option<&str>) -> Result<(), CliError> {
    let mut cfg = SelfCheckConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.fault = match fault {
        None => None,
        Some("flip-psi-sign") => Some(Fault::FlipPsiSign),
        Some(other) => return Err(CliError::config("inject-fault", format!("unknown fault {other:?}"))),
    };
    let results = run_selfcheck(&cfg);
    for r in &results {
        println!(
            "{:4}  {:<44} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelfCheck(failed.join(", ")))
    }
}
