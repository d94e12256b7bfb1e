//! `odeirls`: simulate, fit and analyze ODE parameter estimation runs.
//!
//! Exit status is 0 on success, 2 for invalid configuration or input and 3
//! when a numerical method fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod error;
mod ho;
mod output;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odeirls::inference::CI_TOL;
use odeirls::Scheme;

use config::{parse_list, ExperimentConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "odeirls", version, about = "ODE parameter estimation with solver-error weights")]
struct Cli {
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic observations and the reference trajectory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write noise-free observations.
        #[arg(long)]
        noise_free: bool,
    },
    /// Fit the configured method; writes run.json, weights.csv and trace.csv.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Observations CSV (t, y1, …); generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Estimation error over a grid of step sizes, methods and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated internal step sizes.
        #[arg(long)]
        dt_list: String,
        /// Comma-separated methods (default: the config's method).
        #[arg(long)]
        methods: Option<String>,
        /// Number of seeds, counting up from the config seed.
        #[arg(long, default_value_t = 1)]
        replicates: u64,
    },
    /// Profile-likelihood confidence intervals.
    Ci {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated parameter indices (default: all).
        #[arg(long)]
        params: Option<String>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Bisection tolerance of the interval endpoints.
        #[arg(long, default_value_t = CI_TOL)]
        tol: f64,
        #[arg(long, value_enum, default_value = "reoptimize")]
        profile: run::Profile,
    },
    /// Closed-form harmonic oscillator MSE table.
    Ho {
        #[arg(long, default_value = "midpoint,rk4")]
        schemes: String,
        #[arg(long, default_value_t = 0.5)]
        dt: f64,
        #[arg(long, default_value_t = 2.0)]
        h: f64,
        /// K values, e.g. `1..=100` or `5,10,20`.
        #[arg(long, default_value = "1..=100")]
        k_list: String,
        #[arg(long, default_value = "1,0")]
        theta: String,
        #[arg(long, default_value_t = 0.01)]
        gamma_sq: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { common, noise_free } => {
            let (mut cfg, out) = common.load()?;
            if noise_free {
                cfg.noise = false;
            }
            run::simulate(&cfg, &out)
        }
        Command::Fit { common, data } => {
            let (cfg, out) = common.load()?;
            run::fit_cmd(&cfg, data.as_deref(), &out)
        }
        Command::Sweep {
            common,
            dt_list,
            methods,
            replicates,
        } => {
            let (cfg, out) = common.load()?;
            let args = sweep::SweepArgs {
                dts: parse_list(&dt_list, "dt")?,
                methods: methods.map(|m| parse_list(&m, "method")).transpose()?,
                replicates,
            };
            sweep::sweep_cmd(&cfg, &args, &out)
        }
        Command::Ci {
            common,
            data,
            params,
            level,
            tol,
            profile,
        } => {
            let (cfg, out) = common.load()?;
            let args = run::CiArgs {
                params: params.map(|p| parse_list(&p, "parameter index")).transpose()?,
                level,
                tol,
                profile,
            };
            run::ci_cmd(&cfg, data.as_deref(), &args, &out)
        }
        Command::Ho {
            schemes,
            dt,
            h,
            k_list,
            theta,
            gamma_sq,
            out,
        } => {
            let theta: Vec<f64> = parse_list(&theta, "theta component")?;
            let theta: [f64; 2] = theta
                .try_into()
                .map_err(|_| CliError::Config("--theta needs two components".into()))?;
            let args = ho::HoArgs {
                schemes: parse_list::<Scheme>(&schemes, "scheme")?,
                dt,
                h,
                ks: ho::parse_ks(&k_list)?,
                theta,
                gamma_sq,
            };
            ho::ho_cmd(&args, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
