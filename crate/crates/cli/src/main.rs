use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;
mod output;

use commands::{CliError, Invocation};

#[derive(Parser, Debug)]
#[command(name = "rho-bayes", version, about = "Robust variational rho-posteriors: experiments, fits and bound checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the run commands. Every value is handed to the
/// `key = value` configuration layer, so flags and config files accept the
/// same syntax; flags win over the file.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// gaussian_location, poisson_intensity, uniform_scale, fourier_regression,
    /// correlated_regression, csv_regression or birge_mle
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<String>,
    /// Temperature as a fraction of n (lambda = tau n).
    #[arg(long)]
    tau: Option<String>,
    /// Contamination level(s), comma separated.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    jobs: Option<String>,
    /// Output directory (default: $RHO_BAYES_OUT, else ./rho_out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// adam or extragradient
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    /// Monte-Carlo draws per block and step.
    #[arg(long = "mc-draws")]
    mc_draws: Option<String>,
    /// Any other configuration key, e.g. `--set prior_var=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn flag_entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: &Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        };
        push("scenario", &self.scenario);
        push("n", &self.n);
        push("tau", &self.tau);
        push("eps", &self.eps);
        push("trials", &self.trials);
        push("seed", &self.seed);
        push("jobs", &self.jobs);
        push("optimizer", &self.optimizer);
        push("iters", &self.iters);
        push("mc_draws", &self.mc_draws);
        out
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replicate a contamination scenario and write the risk table.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// CSV file for csv_regression.
        #[arg(long)]
        csv: Option<String>,
        /// Response column of the CSV file.
        #[arg(long)]
        target: Option<String>,
    },
    /// Fit the variational rho-posterior once and write its summary.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Observations, one number per line (i.i.d. scenarios).
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        csv: Option<String>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Monte-Carlo coverage of the oracle inequality.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        delta: Option<String>,
        /// Temperature; overrides --tau.
        #[arg(long)]
        lambda: Option<String>,
        /// Draws for the Hellinger risk expectations.
        #[arg(long = "n-draws")]
        n_draws: Option<String>,
    },
    /// Run the property suites.
    Selfcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "inject-fault", hide = true)]
        inject_fault: Option<String>,
    },
    /// Re-run a command from its manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<String>,
    },
}

fn extra(entries: &mut Vec<(String, String)>, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        entries.push((key.to_string(), v.clone()));
    }
}

fn invocation(name: &str, common: Common, more: Vec<(String, String)>) -> Result<Invocation, CliError> {
    let mut entries = match &common.config {
        Some(path) => commands::read_config_file(path)?,
        None => Vec::new(),
    };
    entries.extend(common.flag_entries());
    entries.extend(more);
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(kv, "expected KEY=VALUE"))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(Invocation {
        command: name.to_string(),
        entries,
        out: common.out,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Experiment { common, csv, target } => {
            let mut more = Vec::new();
            extra(&mut more, "csv_path", &csv);
            extra(&mut more, "csv_target", &target);
            commands::execute(&invocation("experiment", common, more)?)
        }
        Command::Fit {
            common,
            data,
            csv,
            target,
        } => {
            let mut more = Vec::new();
            extra(&mut more, "data", &data);
            extra(&mut more, "csv_path", &csv);
            extra(&mut more, "csv_target", &target);
            commands::execute(&invocation("fit", common, more)?)
        }
        Command::Bound {
            common,
            delta,
            lambda,
            n_draws,
        } => {
            let mut more = Vec::new();
            extra(&mut more, "delta", &delta);
            extra(&mut more, "lambda", &lambda);
            extra(&mut more, "n_draws", &n_draws);
            commands::execute(&invocation("bound", common, more)?)
        }
        Command::Selfcheck { seed, inject_fault } => commands::selfcheck(seed, inject_fault.as_deref()),
        Command::Replay { manifest, out, jobs } => commands::replay(&manifest, out, jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(extra) = e.detail() {
                eprintln!("{extra}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
