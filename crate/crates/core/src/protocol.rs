//! Benchmark observation protocols.
//!
//! A [`Protocol`] fixes everything about an experiment except the solver:
//! the model, the true parameters, the observation times and components,
//! the noise level and the initial guess.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{
    generate_data, protocol_times, trajectory_error, DataGenConfig, EstimationProblem,
    GeneratedData, ObservationSet, ERROR_POINTS,
};
use crate::integrate::{Scheme, REFERENCE_RTOL};
use crate::models::{BuiltinModel, OdeModel, ParameterVector};
use std::sync::Arc;

/// How estimates are scored against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMeasure {
    /// `∫ ‖x(t; θ̂) − x(t; θ)‖² dt` over the observation interval.
    Trajectory,
    /// `‖θ̂ − θ‖²`.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub model: BuiltinModel,
    /// Observation spacing.
    pub h: f64,
    /// 1-based index of the first observation.
    #[serde(default = "one")]
    pub first: usize,
    /// 1-based index of the last observation.
    pub last: usize,
    /// `t_k = (k − 1 + offset)·h`.
    #[serde(default)]
    pub offset: f64,
    /// Observed state components.
    pub observed: Vec<usize>,
    /// Noise variances `γ_j²`.
    pub gamma_sq: Vec<f64>,
    /// Lower bounds `γ̃_j²` used for the weight caps; defaults to `gamma_sq`.
    #[serde(default)]
    pub gamma_sq_lower: Option<Vec<f64>>,
    /// Defaults to the model's benchmark parameters.
    #[serde(default)]
    pub theta_true: Option<Vec<f64>>,
    pub theta0: Vec<f64>,
    pub error: ErrorMeasure,
}

fn one() -> usize {
    1
}

impl Protocol {
    /// Six-parameter Lorenz estimation, all components observed.
    pub fn lorenz() -> Self {
        Protocol {
            model: BuiltinModel::Lorenz,
            h: 0.01,
            first: 1,
            last: 201,
            offset: 0.0,
            observed: vec![0, 1, 2],
            gamma_sq: vec![0.5, 0.1, 0.1],
            gamma_sq_lower: None,
            theta_true: None,
            theta0: vec![-9.0, -1.5, 39.0, 11.0, 29.0, 3.0],
            error: ErrorMeasure::Trajectory,
        }
    }

    /// Lorenz with only `(x1, x2)` observed from the eleventh time point on.
    pub fn lorenz_limited() -> Self {
        Protocol {
            first: 11,
            observed: vec![0, 1],
            gamma_sq: vec![0.5, 0.1],
            ..Self::lorenz()
        }
    }

    /// Lorenz with every noise bound set to `γ̃² = 0.001`.
    pub fn lorenz_unknown_variance() -> Self {
        Protocol {
            gamma_sq_lower: Some(vec![0.001; 3]),
            ..Self::lorenz()
        }
    }

    pub fn fitzhugh_nagumo() -> Self {
        Protocol {
            model: BuiltinModel::FitzhughNagumo,
            h: 0.2,
            first: 1,
            last: 201,
            offset: 0.0,
            observed: vec![0],
            gamma_sq: vec![0.01],
            gamma_sq_lower: None,
            theta_true: None,
            theta0: vec![1.0, 1.0, 1.0],
            error: ErrorMeasure::Squared,
        }
    }

    pub fn kepler() -> Self {
        Protocol {
            model: BuiltinModel::Kepler,
            h: 0.2,
            first: 1,
            last: 101,
            offset: 0.0,
            observed: vec![0, 1],
            gamma_sq: vec![1e-4, 1e-4],
            gamma_sq_lower: None,
            theta_true: None,
            theta0: vec![0.5, 0.05, -0.05, 2.5],
            error: ErrorMeasure::Squared,
        }
    }

    /// Looks up a preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lorenz" => Ok(Self::lorenz()),
            "lorenz_limited" => Ok(Self::lorenz_limited()),
            "lorenz_unknown_variance" => Ok(Self::lorenz_unknown_variance()),
            "fitzhugh_nagumo" => Ok(Self::fitzhugh_nagumo()),
            "kepler" => Ok(Self::kepler()),
            _ => Err(Error::config(format!("unknown protocol `{name}`"))),
        }
    }

    pub const PRESETS: [&'static str; 5] = [
        "lorenz",
        "lorenz_limited",
        "lorenz_unknown_variance",
        "fitzhugh_nagumo",
        "kepler",
    ];

    pub fn build_model(&self) -> Arc<dyn OdeModel> {
        self.model.build()
    }

    pub fn theta_true(&self) -> ParameterVector {
        match &self.theta_true {
            Some(t) => t.clone().into(),
            None => self.model.true_parameters(),
        }
    }

    pub fn theta0(&self) -> ParameterVector {
        self.theta0.clone().into()
    }

    pub fn times(&self) -> Vec<f64> {
        protocol_times(self.h, self.first, self.last, self.offset)
    }

    /// Checks shapes and ranges without running anything.
    pub fn validate(&self) -> Result<()> {
        let model = self.build_model();
        let bad = |msg: String| Err(Error::config(msg));
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("observation spacing h = {} must be positive", self.h));
        }
        if self.first == 0 || self.first > self.last {
            return bad(format!("observation range {}..={} is empty", self.first, self.last));
        }
        if self.first as f64 - 1.0 + self.offset < 0.0 {
            return bad("observation times must be nonnegative".into());
        }
        if self.observed.is_empty() || self.observed.iter().any(|&c| c >= model.state_dim()) {
            return bad(format!("observed components {:?} are invalid", self.observed));
        }
        if self.gamma_sq.len() != self.observed.len() {
            return bad("gamma_sq needs one variance per observed component".into());
        }
        if self.gamma_sq.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return bad("noise variances must be positive".into());
        }
        if let Some(lower) = &self.gamma_sq_lower {
            if lower.len() != self.gamma_sq.len() || lower.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
                return bad("gamma_sq_lower needs one positive bound per observed component".into());
            }
        }
        self.theta_true().validate_for(&*model)?;
        self.theta0().validate_for(&*model)
    }

    /// Synthetic observations for `seed`; `noise = false` returns `H x(t_k)`.
    pub fn generate(&self, seed: u64, noise: bool) -> Result<GeneratedData> {
        self.generate_with_tolerance(seed, noise, REFERENCE_RTOL)
    }

    /// [`Protocol::generate`] with the reference solver at `rtol = atol = tol`.
    pub fn generate_with_tolerance(&self, seed: u64, noise: bool, tol: f64) -> Result<GeneratedData> {
        self.validate()?;
        if !(tol > 0.0) {
            return Err(Error::config(format!("reference tolerance must be positive, got {tol}")));
        }
        let mut cfg = DataGenConfig::new(
            self.build_model(),
            self.theta_true(),
            self.times(),
            self.observed.clone(),
            self.gamma_sq.clone(),
            seed,
        );
        cfg.noise = noise;
        cfg.rtol = tol;
        cfg.atol = tol;
        let mut data = generate_data(&cfg)?;
        if let Some(lower) = &self.gamma_sq_lower {
            data.observations = data.observations.with_lower_bounds(lower.clone())?;
        }
        Ok(data)
    }

    /// Wraps externally supplied observation values in this protocol's
    /// observation model.
    pub fn observations(&self, times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<ObservationSet> {
        self.validate()?;
        let h = ObservationSet::selection(&self.observed, self.build_model().state_dim());
        let obs = ObservationSet::new(times, values, h, self.gamma_sq.clone())?;
        match &self.gamma_sq_lower {
            Some(lower) => obs.with_lower_bounds(lower.clone()),
            None => Ok(obs),
        }
    }

    pub fn problem(&self, data: ObservationSet, scheme: Scheme, dt: f64) -> Result<EstimationProblem> {
        EstimationProblem::new(self.build_model(), data, scheme, dt)
    }

    /// Score of `theta_hat` under this protocol's error measure.
    pub fn error(&self, theta_hat: &ParameterVector) -> Result<f64> {
        let truth = self.theta_true();
        match self.error {
            ErrorMeasure::Squared => Ok(theta_hat.squared_distance(&truth)),
            ErrorMeasure::Trajectory => {
                let times = self.times();
                let interval = (times[0], times[times.len() - 1]);
                trajectory_error(&*self.build_model(), theta_hat, &truth, interval, ERROR_POINTS)
            }
        }
    }
}
