//! Experiment configuration files.
//!
//! A config is a flat JSON object. Unknown keys are rejected so that a typo
//! cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use odeirls::estimate::{FitOptions, Method, ProbSettings};
use odeirls::integrate::REFERENCE_RTOL;
use odeirls::{BuiltinModel, ErrorMeasure, Protocol, Scheme};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: BuiltinModel,
    pub scheme: Scheme,
    /// Internal step of the numerical solver; must divide `h`.
    pub dt: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub first: usize,
    pub last: usize,
    #[serde(default)]
    pub offset: f64,
    pub observed: Vec<usize>,
    pub gamma_sq: Vec<f64>,
    #[serde(default)]
    pub gamma_sq_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_true: Option<Vec<f64>>,
    pub theta0: Vec<f64>,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    /// Add observation noise when simulating.
    #[serde(default = "yes")]
    pub noise: bool,
    #[serde(default)]
    pub error: Option<ErrorMeasure>,
    /// Perturbed integrations per sampled weight update.
    #[serde(default = "default_samples")]
    pub prob_samples: usize,
    /// `rtol = atol` of the reference solver used for data and errors.
    #[serde(default = "default_reference_tol")]
    pub reference_tol: f64,
    #[serde(default)]
    pub fit_options: FitOptions,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_samples() -> usize {
    100
}

fn default_reference_tol() -> f64 {
    REFERENCE_RTOL
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Trajectory error for Lorenz, squared parameter error otherwise.
    pub fn error_measure(&self) -> ErrorMeasure {
        self.error.unwrap_or(match self.model {
            BuiltinModel::Lorenz => ErrorMeasure::Trajectory,
            _ => ErrorMeasure::Squared,
        })
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            model: self.model,
            h: self.h,
            first: self.first,
            last: self.last,
            offset: self.offset,
            observed: self.observed.clone(),
            gamma_sq: self.gamma_sq.clone(),
            gamma_sq_lower: self.gamma_sq_lower.clone(),
            theta_true: self.theta_true.clone(),
            theta0: self.theta0.clone(),
            error: self.error_measure(),
        }
    }

    pub fn prob_settings(&self, seed: u64) -> ProbSettings {
        ProbSettings {
            samples: self.prob_samples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.protocol().validate()?;
        check_step(self.h, self.dt)?;
        if self.prob_samples < 2 {
            return Err(CliError::Config("prob_samples must be at least 2".into()));
        }
        if !(self.reference_tol > 0.0) {
            return Err(CliError::Config("reference_tol must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of everything that determines the results. The output
    /// directory is excluded.
    pub fn hash(&self) -> String {
        hash_json(&self.resolved())
    }

    /// The config without its output directory.
    pub fn resolved(&self) -> ExperimentConfig {
        ExperimentConfig {
            out: None,
            ..self.clone()
        }
    }
}

/// `dt` must be positive and divide `h`.
pub fn check_step(h: f64, dt: f64) -> Result<(), CliError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CliError::Config(format!("dt = {dt} must be positive")));
    }
    let n = (h / dt).round();
    if n < 1.0 || ((n * dt - h) / h).abs() > 1e-9 {
        return Err(CliError::Config(format!("dt = {dt} does not divide h = {h}")));
    }
    Ok(())
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    digest(&serde_json::to_vec(value).expect("config serializes"))
}

/// Hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a comma-separated list.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    split_top_level(s)
        .into_iter()
        .map(|item| {
            item.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad {what} `{}`", item.trim())))
        })
        .collect()
}

/// Splits on commas outside parentheses, so `irls(1),irls_prob(3)` has two items.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out.retain(|x| !x.trim().is_empty());
    out
}
