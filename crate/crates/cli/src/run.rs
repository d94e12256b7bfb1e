//! `simulate`, `fit` and `ci`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use odeirls::estimate::{fit, FitResult, InnerDiagnostics};
use odeirls::inference::{likelihood_ratio_ci, ProfileWeights};
use odeirls::{Error, ObservationSet, Protocol};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{hash_json, ExperimentConfig};
use crate::error::CliError;
use crate::output::{num, write_atomic, write_json, Table};

/// Where the observations of a run came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Generated { seed: u64, noise: bool },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Serialize)]
pub struct Observations {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Synthetic data from the config, or the table at `path` checked against
/// the config's observation times and components.
pub fn load_data(
    cfg: &ExperimentConfig,
    path: Option<&Path>,
) -> Result<(Protocol, ObservationSet, DataSource), CliError> {
    let protocol = cfg.protocol();
    let Some(path) = path else {
        let data = protocol.generate_with_tolerance(cfg.seed, cfg.noise, cfg.reference_tol)?;
        let source = DataSource::Generated {
            seed: cfg.seed,
            noise: cfg.noise,
        };
        return Ok((protocol, data.observations, source));
    };
    let (times, values) = crate::output::read_observations(path)?;
    let expected = protocol.times();
    let bad = |msg: String| Err(CliError::Config(format!("{}: {msg}", path.display())));
    if times.len() != expected.len() {
        return bad(format!("{} rows, the config expects {}", times.len(), expected.len()));
    }
    if let Some(k) = (0..times.len()).find(|&k| (times[k] - expected[k]).abs() > 1e-9 * expected[k].abs().max(1.0)) {
        return bad(format!("row {} has t = {}, the config expects {}", k + 1, times[k], expected[k]));
    }
    if values[0].len() != cfg.observed.len() {
        return bad(format!(
            "{} observation columns, the config observes {} components",
            values[0].len(),
            cfg.observed.len()
        ));
    }
    let data = protocol.observations(expected, values)?;
    Ok((protocol, data, DataSource::File { path: path.to_path_buf() }))
}

/// Config hash, extended by the file digest when the data comes from a file.
pub fn run_hash(cfg: &ExperimentConfig, data_path: Option<&Path>) -> Result<String, CliError> {
    match data_path {
        None => Ok(cfg.hash()),
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Ok(hash_json(&(cfg.resolved(), crate::config::digest(&bytes))))
        }
    }
}

fn observation_header(j: usize) -> Vec<String> {
    std::iter::once("t".to_string()).chain((1..=j).map(|i| format!("y{i}"))).collect()
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let protocol = cfg.protocol();
    let data = protocol.generate_with_tolerance(cfg.seed, cfg.noise, cfg.reference_tol)?;
    let (hash, seed) = (cfg.hash(), cfg.seed.to_string());

    let obs = &data.observations;
    let mut table = Table::new(observation_header(obs.n_components()));
    for (t, y) in obs.times().iter().zip(obs.values()) {
        table.push_numbers(std::iter::once(*t).chain(y.iter().copied()));
    }
    write_atomic(&out.join("observations.csv"), &table.render(&hash, &seed))?;

    let m = obs.state_dim();
    let header = std::iter::once("t".to_string()).chain((1..=m).map(|i| format!("x{i}")));
    let mut table = Table::new(header);
    for (t, x) in obs.times().iter().zip(&data.truth) {
        table.push_numbers(std::iter::once(*t).chain(x.iter().copied()));
    }
    write_atomic(&out.join("truth.csv"), &table.render(&hash, &seed))?;
    println!("wrote {} observations to {}", obs.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Timings {
    data_s: f64,
    fit_s: f64,
    error_s: f64,
}

/// Everything needed to reproduce and inspect one fit.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    config_hash: String,
    seed: u64,
    data_source: DataSource,
    observations: Observations,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
    parameter_names: Vec<String>,
    theta_hat: Vec<f64>,
    final_error: f64,
    weights: Vec<Vec<f64>>,
    sigma_sq: Vec<Vec<f64>>,
    objective_trace: Vec<f64>,
    error_trace: Vec<f64>,
    theta_trace: Vec<Vec<f64>>,
    inner: Vec<InnerDiagnostics>,
    converged: bool,
    timings: Timings,
}

/// Runs the method of `cfg` and returns the result, or the partial result
/// together with the failure that ended it.
pub fn run_fit(
    cfg: &ExperimentConfig,
    protocol: &Protocol,
    data: ObservationSet,
) -> Result<(FitResult, Option<Error>), CliError> {
    let problem = protocol.problem(data, cfg.scheme, cfg.dt)?;
    match fit(&problem, &protocol.theta0(), cfg.method, cfg.prob_settings(cfg.seed), &cfg.fit_options) {
        Ok(r) => Ok((r, None)),
        Err(Error::IrlsFailed { partial, source }) => Ok((*partial, Some(*source))),
        Err(e) => Err(e.into()),
    }
}

/// Error of every iterate; iterates the reference solver cannot follow
/// score `NaN`.
pub fn error_trace(protocol: &Protocol, result: &FitResult) -> Vec<f64> {
    result
        .theta_trace
        .par_iter()
        .map(|theta| protocol.error(theta).unwrap_or(f64::NAN))
        .collect()
}

pub fn fit_cmd(cfg: &ExperimentConfig, data_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let (protocol, data, source) = load_data(cfg, data_path)?;
    let data_s = start.elapsed().as_secs_f64();

    let observations = Observations {
        times: data.times().to_vec(),
        values: data.values().to_vec(),
    };
    let times = observations.times.clone();
    let lap = Instant::now();
    let (result, failure) = run_fit(cfg, &protocol, data)?;
    let fit_s = lap.elapsed().as_secs_f64();

    let lap = Instant::now();
    let errors = error_trace(&protocol, &result);
    let error_s = lap.elapsed().as_secs_f64();

    let (hash, seed) = (run_hash(cfg, data_path)?, cfg.seed.to_string());
    let mut trace = Table::new(["iter", "objective", "error"]);
    for (l, (g, e)) in result.objective_trace.iter().zip(&errors).enumerate() {
        trace.push(vec![l.to_string(), num(*g), num(*e)]);
    }
    write_atomic(&out.join("trace.csv"), &trace.render(&hash, &seed))?;

    let j = cfg.observed.len();
    let header = std::iter::once("t".to_string())
        .chain((1..=j).map(|i| format!("w_{i}")))
        .chain((1..=j).map(|i| format!("sigma_{i}")));
    let mut weights = Table::new(header);
    for (k, t) in times.iter().enumerate() {
        let w = result.weights.row(k).iter().copied();
        let sigma = result.sigma_sq_hat[k].iter().map(|s| s.max(0.0).sqrt());
        weights.push_numbers(std::iter::once(*t).chain(w).chain(sigma));
    }
    write_atomic(&out.join("weights.csv"), &weights.render(&hash, &seed))?;

    let record = RunRecord {
        command: "fit",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        config_hash: hash,
        seed: cfg.seed,
        data_source: source,
        observations,
        status: if failure.is_some() { "failed" } else { "ok" },
        failure: failure.as_ref().map(ToString::to_string),
        parameter_names: protocol.build_model().layout().names().to_vec(),
        theta_hat: result.theta_hat.to_vec(),
        final_error: *errors.last().expect("trace starts non-empty"),
        weights: (0..times.len()).map(|k| result.weights.row(k).to_vec()).collect(),
        sigma_sq: result.sigma_sq_hat.clone(),
        objective_trace: result.objective_trace.clone(),
        error_trace: errors.clone(),
        theta_trace: result.theta_trace.iter().map(|t| t.to_vec()).collect(),
        inner: result.inner.clone(),
        converged: result.converged,
        timings: Timings { data_s, fit_s, error_s },
    };
    write_json(&out.join("run.json"), &record)?;

    if let Some(e) = failure {
        return Err(e.into());
    }
    println!(
        "{} after {} iterations: theta = {:?}, error = {}",
        cfg.method,
        result.iterations(),
        record.theta_hat,
        num(record.final_error)
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Re-estimate the weights at every profile point.
    Reoptimize,
    /// Keep the weights of the unconstrained fit.
    Fixed,
}

pub struct CiArgs {
    pub params: Option<Vec<usize>>,
    pub level: f64,
    pub tol: f64,
    pub profile: Profile,
}

#[derive(Debug, Serialize)]
struct CiPlan<'a> {
    config: &'a ExperimentConfig,
    data_hash: String,
    params: &'a [usize],
    level: f64,
    tol: f64,
    profile: &'static str,
}

#[derive(Debug, Serialize)]
struct CiFailure {
    param: String,
    message: String,
}

pub fn ci_cmd(cfg: &ExperimentConfig, data_path: Option<&Path>, args: &CiArgs, out: &Path) -> Result<(), CliError> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Config(format!("level must be in (0, 1), got {}", args.level)));
    }
    let (protocol, data, _) = load_data(cfg, data_path)?;
    let names = protocol.build_model().layout().names().to_vec();
    let params = args.params.clone().unwrap_or_else(|| (0..names.len()).collect());
    if let Some(&i) = params.iter().find(|&&i| i >= names.len()) {
        return Err(CliError::Config(format!("parameter index {i} is out of range (model has {})", names.len())));
    }
    let problem = protocol.problem(data.clone(), cfg.scheme, cfg.dt)?;
    let (mle, failure) = run_fit(cfg, &protocol, data)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let weights = match args.profile {
        Profile::Reoptimize => ProfileWeights::Reoptimize,
        Profile::Fixed => ProfileWeights::Fixed(mle.weights.clone()),
    };
    let intervals: Vec<_> = params
        .par_iter()
        .map(|&i| likelihood_ratio_ci(&problem, &mle, i, args.level, args.tol, &weights, &cfg.fit_options))
        .collect();

    let resolved = cfg.resolved();
    let plan = CiPlan {
        config: &resolved,
        data_hash: run_hash(cfg, data_path)?,
        params: &params,
        level: args.level,
        tol: args.tol,
        profile: match args.profile {
            Profile::Reoptimize => "reoptimize",
            Profile::Fixed => "fixed",
        },
    };
    let hash = hash_json(&plan);
    let threshold = 0.5 * odeirls::inference::chi2_quantile(args.level, 1.0)?;
    let mut table = Table::new(["param", "lower", "estimate", "upper", "threshold"]);
    let mut failures = Vec::new();
    for (&i, ci) in params.iter().zip(&intervals) {
        let (lower, upper) = match ci {
            Ok(ci) => (ci.lower, ci.upper),
            Err(e) => {
                eprintln!("warning: interval for {} failed: {e}", names[i]);
                failures.push(CiFailure {
                    param: names[i].clone(),
                    message: e.to_string(),
                });
                (f64::NAN, f64::NAN)
            }
        };
        table.push(vec![names[i].clone(), num(lower), num(mle.theta_hat[i]), num(upper), num(threshold)]);
    }
    write_atomic(&out.join("ci.csv"), &table.render(&hash, &cfg.seed.to_string()))?;

    #[derive(Serialize)]
    struct CiRecord<'a> {
        plan: CiPlan<'a>,
        config_hash: &'a str,
        theta_hat: Vec<f64>,
        failures: Vec<CiFailure>,
    }
    let n_failed = failures.len();
    write_json(
        &out.join("ci.json"),
        &CiRecord {
            plan,
            config_hash: &hash,
            theta_hat: mle.theta_hat.to_vec(),
            failures,
        },
    )?;
    if n_failed > 0 {
        let first = intervals.into_iter().find_map(Result::err).expect("a failure was recorded");
        return Err(first.into());
    }
    println!("wrote {} intervals at level {} to {}", params.len(), args.level, out.display());
    Ok(())
}
