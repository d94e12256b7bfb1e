//! Residuals, objectives, the weighted least-squares solver, IRLS drivers,
//! the QML baseline, a sampling-based weight alternative and synthetic data.
//!
//! Notation: `K` observation times, `J` observed components, `M` state
//! components. Residuals and squared residuals are stored row-per-time
//! (`K` rows of length `J`).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::wls_gradient;
use crate::error::{Error, Result};
use crate::integrate::{
    integrate, integrate_augmented, integrate_reference, NumericalSolution, Scheme, Stepper,
    TimeGrid, REFERENCE_ATOL, REFERENCE_RTOL,
};
use crate::isotonic::update_weights;
use crate::models::{FixedParams, OdeModel, ParameterVector, VectorField};
use crate::optim::{self, BfgsSettings};

pub use crate::optim::Termination;

/// Noisy observations `y_k = H x(t_k) + ε_k`, `ε_k ~ N(0, diag(γ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    gamma_sq: Vec<f64>,
    gamma_sq_lower: Vec<f64>,
}

impl ObservationSet {
    /// `h` is `J×M` (one row per observed component).
    pub fn new(
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
        gamma_sq: Vec<f64>,
    ) -> Result<Self> {
        let j = h.len();
        if j == 0 {
            return Err(Error::config("observation matrix has no rows"));
        }
        let m = h[0].len();
        if m == 0 || h.iter().any(|r| r.len() != m) {
            return Err(Error::config("observation matrix rows differ in length"));
        }
        if h.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("observation matrix has non-finite entries"));
        }
        let hm = DMatrix::from_fn(j, m, |r, c| h[r][c]);
        if j > m || hm.rank(1e-12) < j {
            return Err(Error::config("observation matrix must have full row rank"));
        }
        if times.is_empty() {
            return Err(Error::config("no observation times"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("observation times must be finite and strictly increasing"));
        }
        if values.len() != times.len() || values.iter().any(|r| r.len() != j) {
            return Err(Error::config(format!(
                "expected {} observations with {j} components each",
                times.len()
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("observations must be finite"));
        }
        if gamma_sq.len() != j || gamma_sq.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::config(format!(
                "need {j} positive noise variances, got {gamma_sq:?}"
            )));
        }
        Ok(ObservationSet {
            times,
            values,
            h,
            gamma_sq_lower: gamma_sq.clone(),
            gamma_sq,
        })
    }

    /// Replaces the weight caps by `1/lower` for unknown-variance estimation.
    pub fn with_lower_bounds(mut self, lower: Vec<f64>) -> Result<Self> {
        if lower.len() != self.gamma_sq.len()
            || lower.iter().any(|g| !(g.is_finite() && *g > 0.0))
        {
            return Err(Error::config("noise variance lower bounds must be positive, one per component"));
        }
        if lower.iter().zip(&self.gamma_sq).any(|(l, g)| l > g) {
            return Err(Error::config("a noise variance lower bound exceeds the variance"));
        }
        self.gamma_sq_lower = lower;
        Ok(self)
    }

    /// Rows of the identity selecting `components` of an `m`-dimensional state.
    pub fn selection(components: &[usize], m: usize) -> Vec<Vec<f64>> {
        components
            .iter()
            .map(|&c| (0..m).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_components(&self) -> usize {
        self.h.len()
    }

    pub fn state_dim(&self) -> usize {
        self.h[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn h(&self) -> &[Vec<f64>] {
        &self.h
    }

    pub fn gamma_sq(&self) -> &[f64] {
        &self.gamma_sq
    }

    pub fn gamma_sq_lower(&self) -> &[f64] {
        &self.gamma_sq_lower
    }

    /// `1/γ̃_j²`.
    pub fn caps(&self) -> Vec<f64> {
        self.gamma_sq_lower.iter().map(|g| 1.0 / g).collect()
    }

    /// `H x` for a state whose leading `M` entries are `x`.
    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        self.h
            .iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Weights `w_{k,j}` with caps `1/γ̃_j²`, stored row-major `K×J`.
///
/// A fitted matrix satisfies `0 < w_{K,j} ≤ … ≤ w_{1,j} ≤ cap_j`
/// ([`WeightMatrix::satisfies_order`]); arbitrary nonnegative weights are
/// accepted so that plain weighted least squares can be expressed too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    caps: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(rows: usize, w: Vec<f64>, caps: Vec<f64>) -> Result<Self> {
        let cols = caps.len();
        if w.len() != rows * cols {
            return Err(Error::config(format!(
                "weight matrix needs {rows}×{cols} entries, got {}",
                w.len()
            )));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("weights must be finite and nonnegative"));
        }
        if caps.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::config("weight caps must be positive"));
        }
        Ok(WeightMatrix { rows, cols, w, caps })
    }

    /// Every weight at its cap: the conventional (QML) choice.
    pub fn at_caps(rows: usize, caps: Vec<f64>) -> Self {
        let w = (0..rows).flat_map(|_| caps.iter().copied()).collect();
        WeightMatrix {
            rows,
            cols: caps.len(),
            w,
            caps,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.w[k * self.cols + j]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.w[k * self.cols..(k + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|k| self.get(k, j)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    /// The order constraint, checked exactly.
    pub fn satisfies_order(&self) -> bool {
        (0..self.cols).all(|j| {
            let col = self.column(j);
            col.iter().all(|&v| v > 0.0)
                && col.first().is_none_or(|&v| v <= self.caps[j])
                && col.windows(2).all(|p| p[1] <= p[0])
        })
    }

    /// `σ̂²_{k,j} = 1/w_{k,j} − γ̃_j²`, floored at zero against rounding.
    pub fn sigma_sq(&self, gamma_sq_lower: &[f64]) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|k| {
                self.row(k)
                    .iter()
                    .zip(gamma_sq_lower)
                    .map(|(w, g)| (1.0 / w - g).max(0.0))
                    .collect()
            })
            .collect()
    }
}

/// `r_{k,j} = y_{k,j} − H_j x̃_k`.
pub fn residuals(data: &ObservationSet, solution: &NumericalSolution) -> Result<Vec<Vec<f64>>> {
    if solution.obs_index().len() != data.len() {
        return Err(Error::config(format!(
            "solution has {} observation nodes, data has {}",
            solution.obs_index().len(),
            data.len()
        )));
    }
    if solution.dim() < data.state_dim() {
        return Err(Error::config("observation matrix is wider than the state"));
    }
    Ok((0..data.len())
        .map(|k| {
            let hx = data.observe(solution.observed(k));
            data.value(k).iter().zip(hx).map(|(y, v)| y - v).collect()
        })
        .collect())
}

/// Elementwise squares of a residual table.
pub fn squared(residuals: &[Vec<f64>]) -> Vec<Vec<f64>> {
    residuals
        .iter()
        .map(|r| r.iter().map(|v| v * v).collect())
        .collect()
}

/// `R̃ = Σ_{k,j} w_{k,j} r_{k,j}²`.
pub fn weighted_sum_of_squares(residuals: &[Vec<f64>], weights: &WeightMatrix) -> f64 {
    residuals
        .iter()
        .enumerate()
        .map(|(k, r)| r.iter().zip(weights.row(k)).map(|(r, w)| w * r * r).sum::<f64>())
        .sum()
}

/// `g = Σ_{k,j} (−log w_{k,j} + w_{k,j} r_{k,j}²)`; equals −2 log-likelihood
/// minus `KJ log 2π`.
pub fn objective_g(residuals: &[Vec<f64>], weights: &WeightMatrix) -> Result<f64> {
    if residuals.len() != weights.rows() || residuals.iter().any(|r| r.len() != weights.cols()) {
        return Err(Error::config("residual and weight shapes differ"));
    }
    let mut g = 0.0;
    for (k, r) in residuals.iter().enumerate() {
        for (j, (rv, &w)) in r.iter().zip(weights.row(k)).enumerate() {
            if !(w > 0.0) {
                return Err(Error::Domain {
                    component: j,
                    detail: format!("weight at row {k} is not positive ({w})"),
                });
            }
            g += -w.ln() + w * rv * rv;
        }
    }
    Ok(g)
}

/// Model, data, scheme and grid of one estimation task.
#[derive(Debug, Clone)]
pub struct EstimationProblem {
    pub model: Arc<dyn OdeModel>,
    pub data: ObservationSet,
    pub scheme: Scheme,
    pub grid: TimeGrid,
}

impl EstimationProblem {
    /// Uses internal step `dt`, which must divide every observation interval.
    pub fn new(
        model: Arc<dyn OdeModel>,
        data: ObservationSet,
        scheme: Scheme,
        dt: f64,
    ) -> Result<Self> {
        let grid = TimeGrid::with_step(data.times().to_vec(), dt)?;
        Self::with_grid(model, data, scheme, grid)
    }

    pub fn with_grid(
        model: Arc<dyn OdeModel>,
        data: ObservationSet,
        scheme: Scheme,
        grid: TimeGrid,
    ) -> Result<Self> {
        if grid.times() != data.times() {
            return Err(Error::config("grid and observations use different times"));
        }
        if data.state_dim() != model.state_dim() {
            return Err(Error::config(format!(
                "observation matrix has {} columns, model {} has {} states",
                data.state_dim(),
                model.name(),
                model.state_dim()
            )));
        }
        scheme.check_applicable(&FixedParams::new(&*model, &vec![0.0; model.param_dim()]))?;
        Ok(EstimationProblem {
            model,
            data,
            scheme,
            grid,
        })
    }

    pub fn solve(&self, theta: &ParameterVector) -> Result<NumericalSolution> {
        integrate(&*self.model, theta, &self.grid, self.scheme)
    }

    pub fn residuals(&self, theta: &ParameterVector) -> Result<Vec<Vec<f64>>> {
        residuals(&self.data, &self.solve(theta)?)
    }

    /// `R̃(θ)` and its exact gradient.
    pub fn wls_value_and_gradient(
        &self,
        theta: &ParameterVector,
        weights: &WeightMatrix,
    ) -> Result<(f64, Vec<f64>)> {
        let sol = integrate_augmented(&*self.model, theta, &self.grid, self.scheme)?;
        let res = residuals(&self.data, &sol)?;
        let value = weighted_sum_of_squares(&res, weights);
        let grad = wls_gradient(&*self.model, theta, weights, &self.data, &sol)?;
        Ok((value, grad))
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Relative gradient tolerance of the inner solver.
    pub gtol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Iteration count of IRLS when no explicit `L` is requested.
    pub irls_max_iter: usize,
    /// Early exit of IRLS on relative objective change (`None` disables).
    pub irls_rel_tol: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            gtol: 1e-8,
            step_tol: 1e-12,
            max_iter: 400,
            irls_max_iter: 20,
            irls_rel_tol: Some(1e-10),
        }
    }
}

impl FitOptions {
    fn bfgs(&self) -> BfgsSettings {
        BfgsSettings {
            gtol: self.gtol,
            step_tol: self.step_tol,
            max_iter: self.max_iter,
        }
    }
}

/// Inner-solver summary for one θ-update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_inf_norm: f64,
    pub objective: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub theta: ParameterVector,
    pub diagnostics: InnerDiagnostics,
}

/// Minimizes `R̃(θ)` for fixed weights by BFGS with adjoint gradients.
pub fn wls_fit(
    problem: &EstimationProblem,
    theta0: &ParameterVector,
    weights: &WeightMatrix,
    opts: &FitOptions,
) -> Result<WlsFit> {
    let free = vec![true; theta0.len()];
    wls_fit_masked(problem, theta0, weights, &free, opts)
}

/// As [`wls_fit`] with coordinates where `free[i]` is false held at `theta0`.
pub fn wls_fit_masked(
    problem: &EstimationProblem,
    theta0: &ParameterVector,
    weights: &WeightMatrix,
    free: &[bool],
    opts: &FitOptions,
) -> Result<WlsFit> {
    theta0.validate_for(&*problem.model)?;
    if free.len() != theta0.len() {
        return Err(Error::config("free-parameter mask has the wrong length"));
    }
    if weights.rows() != problem.data.len() || weights.cols() != problem.data.n_components() {
        return Err(Error::config("weight matrix shape does not match the observations"));
    }
    let idx: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
    let x0: Vec<f64> = idx.iter().map(|&i| theta0[i]).collect();
    let expand = |x: &[f64]| {
        let mut theta = theta0.clone();
        for (&i, &v) in idx.iter().zip(x) {
            theta.0[i] = v;
        }
        theta
    };
    let report = optim::minimize(
        |x| {
            let (v, g) = problem.wls_value_and_gradient(&expand(x), weights)?;
            Ok((v, idx.iter().map(|&i| g[i]).collect()))
        },
        &x0,
        &opts.bfgs(),
    )?;
    Ok(WlsFit {
        theta: expand(&report.x),
        diagnostics: InnerDiagnostics {
            iterations: report.iterations,
            evaluations: report.evaluations,
            grad_inf_norm: report.grad_inf_norm,
            objective: report.f,
            termination: report.termination,
        },
    })
}

/// The conventional estimate: weighted least squares with `w = 1/γ̃²`.
pub fn qml_fit(
    problem: &EstimationProblem,
    theta0: &ParameterVector,
    opts: &FitOptions,
) -> Result<ParameterVector> {
    let w = WeightMatrix::at_caps(problem.data.len(), problem.data.caps());
    Ok(wls_fit(problem, theta0, &w, opts)?.theta)
}

/// How IRLS produces the weights of each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightUpdate {
    /// Exact minimizer under the order constraint.
    Isotonic,
    /// Always at the caps (reduces IRLS(1) to the conventional estimate).
    Pinned,
    /// Sample variance of a perturbed solver, see [`probabilistic_weight_estimate`].
    Probabilistic { samples: usize, seed: u64 },
}

/// Outcome of an IRLS run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    pub weights: WeightMatrix,
    /// `1/w − γ̃²`, `K` rows of `J`.
    pub sigma_sq_hat: Vec<Vec<f64>>,
    /// `g(θ^(0), w^(1))` followed by `g(θ^(l), w^(l))` for `l = 1, 2, …`.
    pub objective_trace: Vec<f64>,
    /// `θ^(0), θ^(1), …`.
    pub theta_trace: Vec<ParameterVector>,
    pub inner: Vec<InnerDiagnostics>,
    /// True when the objective-change rule ended the run early.
    pub converged: bool,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.inner.len()
    }
}

/// IRLS: alternate the isotonic weight update and the θ-update.
///
/// `iterations = Some(L)` runs exactly `L` iterations; `None` runs up to
/// `opts.irls_max_iter` and stops early once the relative objective change
/// falls below `opts.irls_rel_tol`.
pub fn irls(
    problem: &EstimationProblem,
    theta0: &ParameterVector,
    iterations: Option<usize>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let free = vec![true; theta0.len()];
    irls_with(problem, theta0, iterations, WeightUpdate::Isotonic, &free, opts)
}

/// IRLS with an explicit weight policy and free-parameter mask.
pub fn irls_with(
    problem: &EstimationProblem,
    theta0: &ParameterVector,
    iterations: Option<usize>,
    update: WeightUpdate,
    free: &[bool],
    opts: &FitOptions,
) -> Result<FitResult> {
    theta0.validate_for(&*problem.model)?;
    let data = &problem.data;
    let caps = data.caps();
    let lower = data.gamma_sq_lower().to_vec();
    let n_iter = iterations.unwrap_or(opts.irls_max_iter);
    let early_stop = if iterations.is_none() { opts.irls_rel_tol } else { None };

    let weights_at = |theta: &ParameterVector, res: &[Vec<f64>]| -> Result<WeightMatrix> {
        match update {
            WeightUpdate::Isotonic => update_weights(&squared(res), &caps),
            WeightUpdate::Pinned => Ok(WeightMatrix::at_caps(data.len(), caps.clone())),
            WeightUpdate::Probabilistic { samples, seed } => {
                let s2 = probabilistic_weight_estimate(problem, theta, samples, seed)?;
                let w = s2
                    .iter()
                    .flat_map(|row| {
                        row.iter()
                            .zip(&lower)
                            .zip(&caps)
                            .map(|((s, g), c)| (1.0 / (g + s)).min(*c))
                    })
                    .collect();
                WeightMatrix::new(data.len(), w, caps.clone())
            }
        }
    };

    let mut theta = theta0.clone();
    let mut res = problem.residuals(&theta)?;
    let mut weights = weights_at(&theta, &res)?;
    let mut result = FitResult {
        theta_hat: theta.clone(),
        weights: weights.clone(),
        sigma_sq_hat: weights.sigma_sq(&lower),
        objective_trace: vec![objective_g(&res, &weights)?],
        theta_trace: vec![theta.clone()],
        inner: Vec::new(),
        converged: false,
    };

    for l in 1..=n_iter {
        if l > 1 {
            weights = weights_at(&theta, &res)?;
        }
        let step = wls_fit_masked(problem, &theta, &weights, free, opts)
            .and_then(|fit| Ok((problem.residuals(&fit.theta)?, fit)));
        let (new_res, fit) = match step {
            Ok(v) => v,
            Err(e) => {
                return Err(Error::IrlsFailed {
                    partial: Box::new(result),
                    source: Box::new(e),
                })
            }
        };
        theta = fit.theta;
        res = new_res;
        let g = objective_g(&res, &weights)?;
        let prev = *result.objective_trace.last().expect("trace starts non-empty");
        result.objective_trace.push(g);
        result.theta_trace.push(theta.clone());
        result.inner.push(fit.diagnostics);
        result.theta_hat = theta.clone();
        result.sigma_sq_hat = weights.sigma_sq(&lower);
        result.weights = weights.clone();
        if let Some(tol) = early_stop {
            if l > 1 && (prev - g).abs() <= tol * g.abs().max(1.0) {
                result.converged = true;
                break;
            }
        }
    }
    Ok(result)
}

/// Estimation method selector used by drivers and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Weighted least squares with every weight at its cap.
    Conventional,
    /// IRLS with the objective-change stopping rule.
    Irls,
    /// Exactly `L` IRLS iterations.
    IrlsL(usize),
    /// `L` IRLS iterations with sampled weights.
    IrlsProb(usize),
}

/// Iterations used by `irls_prob` when none are given.
pub const DEFAULT_PROB_ITERATIONS: usize = 3;

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Conventional => f.write_str("conventional"),
            Method::Irls => f.write_str("irls"),
            Method::IrlsL(n) => write!(f, "irls({n})"),
            Method::IrlsProb(n) => write!(f, "irls_prob({n})"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let arg = |prefix: &str| -> Option<Result<usize>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad iteration count in `{s}`"))),
            )
        };
        match s {
            "conventional" | "qml" => Ok(Method::Conventional),
            "irls" => Ok(Method::Irls),
            "irls_prob" => Ok(Method::IrlsProb(DEFAULT_PROB_ITERATIONS)),
            _ => {
                if let Some(n) = arg("irls_prob") {
                    Ok(Method::IrlsProb(n?))
                } else if let Some(n) = arg("irls") {
                    Ok(Method::IrlsL(n?))
                } else {
                    Err(Error::config(format!("unknown method `{s}`")))
                }
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Settings of the sampled weight update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbSettings {
    pub samples: usize,
    pub seed: u64,
}

/// Runs `method` from `theta0`. The conventional method is reported as a
/// one-iteration fit with pinned weights so all methods share one result type.
pub fn fit(
    problem: &EstimationProblem,
    theta0: &ParameterVector,
    method: Method,
    prob: ProbSettings,
    opts: &FitOptions,
) -> Result<FitResult> {
    let free = vec![true; theta0.len()];
    match method {
        Method::Conventional => {
            irls_with(problem, theta0, Some(1), WeightUpdate::Pinned, &free, opts)
        }
        Method::Irls => irls(problem, theta0, None, opts),
        Method::IrlsL(n) => irls(problem, theta0, Some(n), opts),
        Method::IrlsProb(n) => irls_with(
            problem,
            theta0,
            Some(n),
            WeightUpdate::Probabilistic {
                samples: prob.samples,
                seed: prob.seed,
            },
            &free,
            opts,
        ),
    }
}

/// Generator for stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Discretization-error variance from a perturbed solver.
///
/// Along the unperturbed path the local error of every step is estimated
/// by comparing one step of size `Δt` with two steps of size `Δt/2`. Each
/// sample then re-integrates with `N(0, diag(e_n²))` noise added after step
/// `n`, and `σ̂²_{k,j}` is the sample variance of `H_j x̃_k` across samples.
/// Samples run in parallel on independent streams of `seed`.
pub fn probabilistic_weight_estimate(
    problem: &EstimationProblem,
    theta: &ParameterVector,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_samples < 2 {
        return Err(Error::config("the sampled variance needs at least two samples"));
    }
    let model = &*problem.model;
    theta.validate_for(model)?;
    let field = FixedParams::new(model, theta);
    let dim = field.dim();
    let steps: Vec<(f64, f64)> = problem.grid.steps().collect();
    let obs = problem.grid.obs_index();

    // Local error scale per step.
    let base = problem.solve(theta)?;
    let mut stepper = Stepper::new(problem.scheme, &field)?;
    let mut full = vec![0.0; dim];
    let mut half = vec![0.0; dim];
    let mut two = vec![0.0; dim];
    let mut scale = Vec::with_capacity(steps.len() * dim);
    for (n, &(t, dt)) in steps.iter().enumerate() {
        let z = base.state(n);
        stepper.step(&field, z, t, dt, &mut full)?;
        stepper.step(&field, z, t, 0.5 * dt, &mut half)?;
        stepper.step(&field, &half, t + 0.5 * dt, 0.5 * dt, &mut two)?;
        scale.extend(full.iter().zip(&two).map(|(a, b)| (a - b).abs()));
    }

    let data = &problem.data;
    let samples: Vec<Vec<Vec<f64>>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| -> Result<Vec<Vec<f64>>> {
            let mut rng = rng_stream(seed, s);
            let mut stepper = Stepper::new(problem.scheme, &field)?;
            let mut z = model.layout().initial_state(theta);
            let mut next = vec![0.0; dim];
            let mut out = Vec::with_capacity(obs.len());
            let mut k = 0;
            while k < obs.len() && obs[k] == 0 {
                out.push(data.observe(&z));
                k += 1;
            }
            for (n, &(t, dt)) in steps.iter().enumerate() {
                stepper.step(&field, &z, t, dt, &mut next)?;
                for (i, v) in next.iter_mut().enumerate() {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    *v += scale[n * dim + i] * xi;
                }
                std::mem::swap(&mut z, &mut next);
                while k < obs.len() && obs[k] == n + 1 {
                    out.push(data.observe(&z));
                    k += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let j = data.n_components();
    let ns = n_samples as f64;
    Ok((0..obs.len())
        .map(|k| {
            (0..j)
                .map(|c| {
                    let mean = samples.iter().map(|s| s[k][c]).sum::<f64>() / ns;
                    samples.iter().map(|s| (s[k][c] - mean).powi(2)).sum::<f64>() / (ns - 1.0)
                })
                .collect()
        })
        .collect())
}

/// Recipe for synthetic observations.
#[derive(Debug, Clone)]
pub struct DataGenConfig {
    pub model: Arc<dyn OdeModel>,
    pub theta_true: ParameterVector,
    pub times: Vec<f64>,
    /// Observed state components (rows of `H`).
    pub observed: Vec<usize>,
    pub gamma_sq: Vec<f64>,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
    /// When false the data equal `H x(t_k)` exactly.
    pub noise: bool,
}

impl DataGenConfig {
    pub fn new(
        model: Arc<dyn OdeModel>,
        theta_true: ParameterVector,
        times: Vec<f64>,
        observed: Vec<usize>,
        gamma_sq: Vec<f64>,
        seed: u64,
    ) -> Self {
        DataGenConfig {
            model,
            theta_true,
            times,
            observed,
            gamma_sq,
            seed,
            rtol: REFERENCE_RTOL,
            atol: REFERENCE_ATOL,
            noise: true,
        }
    }
}

/// Observations together with the noise-free reference states.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub observations: ObservationSet,
    pub truth: Vec<Vec<f64>>,
}

/// `t_k = (k − 1 + offset)·h` for `k = first, …, last` (1-based, inclusive).
pub fn protocol_times(h: f64, first: usize, last: usize, offset: f64) -> Vec<f64> {
    (first..=last)
        .map(|k| (k as f64 - 1.0 + offset) * h)
        .collect()
}

/// Reference solution at the observation times plus `N(0, diag(γ²))` noise.
pub fn generate_data(cfg: &DataGenConfig) -> Result<GeneratedData> {
    let model = &*cfg.model;
    cfg.theta_true.validate_for(model)?;
    let m = model.state_dim();
    if cfg.observed.is_empty() || cfg.observed.iter().any(|&c| c >= m) {
        return Err(Error::config(format!(
            "observed components {:?} are invalid for a {m}-dimensional state",
            cfg.observed
        )));
    }
    let h = ObservationSet::selection(&cfg.observed, m);
    let truth = integrate_reference(model, &cfg.theta_true, &cfg.times, cfg.rtol, cfg.atol)?;
    let mut rng = rng_stream(cfg.seed, 0);
    let sd: Vec<f64> = cfg.gamma_sq.iter().map(|g| g.sqrt()).collect();
    let values: Vec<Vec<f64>> = truth
        .iter()
        .map(|x| {
            cfg.observed
                .iter()
                .zip(&sd)
                .map(|(&c, s)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    if cfg.noise {
                        x[c] + s * e
                    } else {
                        x[c]
                    }
                })
                .collect()
        })
        .collect();
    let observations = ObservationSet::new(cfg.times.clone(), values, h, cfg.gamma_sq.clone())?;
    Ok(GeneratedData {
        observations,
        truth,
    })
}

/// Trapezoid approximation of `∫_a^b ‖x(t; θ̂) − x(t; θ)‖² dt` on
/// `n_points` equispaced nodes, both trajectories from the reference solver.
pub fn trajectory_error(
    model: &dyn OdeModel,
    theta_hat: &ParameterVector,
    theta_true: &ParameterVector,
    interval: (f64, f64),
    n_points: usize,
) -> Result<f64> {
    let (a, b) = interval;
    if !(b > a) || a < 0.0 || n_points < 2 {
        return Err(Error::config("error interval needs 0 ≤ a < b and at least two points"));
    }
    let times: Vec<f64> = (0..n_points)
        .map(|i| a + (b - a) * i as f64 / (n_points - 1) as f64)
        .collect();
    let xs = integrate_reference(model, theta_hat, &times, REFERENCE_RTOL, REFERENCE_ATOL)?;
    let ys = integrate_reference(model, theta_true, &times, REFERENCE_RTOL, REFERENCE_ATOL)?;
    let d: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect();
    let dt = (b - a) / (n_points - 1) as f64;
    let inner: f64 = d[1..n_points - 1].iter().sum();
    Ok(dt * (inner + 0.5 * (d[0] + d[n_points - 1])))
}

/// Default quadrature size of [`trajectory_error`].
pub const ERROR_POINTS: usize = 10_000;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::ho_step_matrix;
    use crate::models::{builtin, BuiltinModel, ParamLayout};
    use nalgebra::{Matrix2, Vector2};

    #[test]
    fn residual_examples() {
        let model = builtin("harmonic_oscillator").unwrap();
        let grid = TimeGrid::new(vec![0.0], 1).unwrap();
        let sol = integrate(&*model, &vec![1.0, 2.0].into(), &grid, Scheme::Rk4).unwrap();
        let data = ObservationSet::new(vec![0.0], vec![vec![3.0]], vec![vec![1.0, 0.0]], vec![1.0])
            .unwrap();
        assert_eq!(residuals(&data, &sol).unwrap(), vec![vec![2.0]]);
        let exact = ObservationSet::new(vec![0.0], vec![vec![1.0]], vec![vec![1.0, 0.0]], vec![1.0])
            .unwrap();
        assert_eq!(residuals(&exact, &sol).unwrap(), vec![vec![0.0]]);
        let two = ObservationSet::new(
            vec![0.0, 1.0],
            vec![vec![1.0], vec![1.0]],
            vec![vec![1.0, 0.0]],
            vec![1.0],
        )
        .unwrap();
        assert!(residuals(&two, &sol).unwrap_err().is_config());
    }

    #[test]
    fn objective_examples() {
        let w = WeightMatrix::new(1, vec![2.0], vec![2.0]).unwrap();
        let g = objective_g(&[vec![3f64.sqrt()]], &w).unwrap();
        assert!((g - 5.306_852_819_440_055).abs() < 1e-12);
        let w = WeightMatrix::at_caps(2, vec![1.0, 1.0]);
        assert_eq!(objective_g(&[vec![0.0, 0.0], vec![0.0, 0.0]], &w).unwrap(), 0.0);
        let w = WeightMatrix::new(1, vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(objective_g(&[vec![1.0]], &w), Err(Error::Domain { .. })));
    }

    #[test]
    fn observation_set_validation() {
        let h = ObservationSet::selection(&[0], 2);
        assert!(ObservationSet::new(vec![0.0, 0.0], vec![vec![1.0]; 2], h.clone(), vec![1.0]).is_err());
        assert!(ObservationSet::new(vec![0.0], vec![vec![1.0]], h.clone(), vec![0.0]).is_err());
        assert!(ObservationSet::new(vec![0.0], vec![vec![1.0]], vec![vec![0.0, 0.0]], vec![1.0]).is_err());
        let d = ObservationSet::new(vec![0.0], vec![vec![1.0]], h, vec![0.5]).unwrap();
        assert!(d.clone().with_lower_bounds(vec![1.0]).is_err());
        let d = d.with_lower_bounds(vec![0.001]).unwrap();
        assert_eq!(d.caps(), vec![1000.0]);
    }

    fn ho_problem(scheme: Scheme, dt: f64, h: f64, k: usize, values: Vec<Vec<f64>>) -> EstimationProblem {
        let model = builtin("harmonic_oscillator").unwrap();
        let times: Vec<f64> = (1..=k).map(|i| i as f64 * h).collect();
        let data = ObservationSet::new(times, values, ObservationSet::selection(&[0, 1], 2), vec![0.01, 0.01])
            .unwrap();
        EstimationProblem::new(model, data, scheme, dt).unwrap()
    }

    #[test]
    fn wls_on_oscillator_matches_normal_equations() {
        let k = 15;
        let values: Vec<Vec<f64>> = (0..k)
            .map(|i| vec![(i as f64 * 0.9).cos() + 0.05, (i as f64 * 0.4).sin()])
            .collect();
        for scheme in [Scheme::ExplicitEuler, Scheme::Midpoint, Scheme::Rk4] {
            let p = ho_problem(scheme, 0.25, 0.5, k, values.clone());
            let wv: Vec<f64> = (0..k).flat_map(|i| [100.0 / (1.0 + i as f64), 50.0]).collect();
            let w = WeightMatrix::new(k, wv, vec![100.0, 100.0]).unwrap();
            let fit = wls_fit(&p, &vec![0.0, 0.0].into(), &w, &FitOptions::default()).unwrap();

            let mt = ho_step_matrix(scheme, 0.25, 0.5).unwrap();
            let mut a = Matrix2::zeros();
            let mut rhs = Vector2::zeros();
            let mut mk = Matrix2::identity();
            for i in 0..k {
                mk = mt * mk;
                let wk = Matrix2::new(w.get(i, 0), 0.0, 0.0, w.get(i, 1));
                a += mk.transpose() * wk * mk;
                rhs += mk.transpose() * wk * Vector2::new(values[i][0], values[i][1]);
            }
            let sol = a.lu().solve(&rhs).unwrap();
            assert!((fit.theta[0] - sol[0]).abs() <= 1e-8, "{scheme}: {:?} vs {sol}", fit.theta);
            assert!((fit.theta[1] - sol[1]).abs() <= 1e-8, "{scheme}");
        }
    }

    #[test]
    fn stationary_start_is_kept() {
        let model = builtin("fitzhugh_nagumo").unwrap();
        let truth = BuiltinModel::FitzhughNagumo.true_parameters();
        let times = protocol_times(0.2, 1, 51, 0.0);
        let grid = TimeGrid::with_step(times.clone(), 0.05).unwrap();
        let sol = integrate(&*model, &truth, &grid, Scheme::ExplicitEuler).unwrap();
        let values = (0..times.len()).map(|k| vec![sol.observed(k)[0]]).collect();
        let data = ObservationSet::new(times, values, vec![vec![1.0, 0.0]], vec![0.01]).unwrap();
        let p = EstimationProblem::with_grid(model, data, Scheme::ExplicitEuler, grid).unwrap();
        let fit = qml_fit(&p, &truth, &FitOptions::default()).unwrap();
        assert_eq!(fit, truth);
    }

    #[test]
    fn conventional_equals_pinned_single_iteration() {
        let k = 10;
        let values: Vec<Vec<f64>> = (0..k).map(|i| vec![(i as f64).cos(), -(i as f64).sin()]).collect();
        let p = ho_problem(Scheme::Midpoint, 0.5, 1.0, k, values);
        let opts = FitOptions::default();
        let theta0: ParameterVector = vec![0.3, 0.3].into();
        let q = qml_fit(&p, &theta0, &opts).unwrap();
        let r = irls_with(&p, &theta0, Some(1), WeightUpdate::Pinned, &[true, true], &opts).unwrap();
        assert_eq!(q, r.theta_hat);
    }

    #[test]
    fn zero_iterations_echo_initial_guess() {
        let k = 6;
        let values: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64, 1.0]).collect();
        let p = ho_problem(Scheme::Rk4, 0.5, 0.5, k, values);
        let theta0: ParameterVector = vec![0.3, -0.2].into();
        let r = irls(&p, &theta0, Some(0), &FitOptions::default()).unwrap();
        assert_eq!(r.theta_hat, theta0);
        assert_eq!(r.objective_trace.len(), 1);
        assert!(r.weights.satisfies_order());
        let res = p.residuals(&theta0).unwrap();
        assert_eq!(r.weights, update_weights(&squared(&res), &p.data.caps()).unwrap());
    }

    #[test]
    fn method_strings_round_trip() {
        for m in [Method::Conventional, Method::Irls, Method::IrlsL(3), Method::IrlsProb(2)] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("irls_prob".parse::<Method>().unwrap(), Method::IrlsProb(3));
        assert!("irls(x)".parse::<Method>().is_err());
        assert!("newton".parse::<Method>().is_err());
    }

    #[test]
    fn generated_data_is_deterministic_and_noise_free_on_request() {
        let model = builtin("lorenz").unwrap();
        let times = protocol_times(0.01, 1, 21, 0.0);
        let mut cfg = DataGenConfig::new(
            model,
            BuiltinModel::Lorenz.true_parameters(),
            times,
            vec![0, 1, 2],
            vec![0.5, 0.1, 0.1],
            42,
        );
        let a = generate_data(&cfg).unwrap();
        let b = generate_data(&cfg).unwrap();
        assert_eq!(a.observations, b.observations);
        cfg.noise = false;
        let c = generate_data(&cfg).unwrap();
        for (k, x) in c.truth.iter().enumerate() {
            assert_eq!(c.observations.value(k), x.as_slice());
        }
        cfg.observed = vec![3];
        assert!(generate_data(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn trajectory_error_examples() {
        let model = builtin("harmonic_oscillator").unwrap();
        let theta: ParameterVector = vec![1.0, 0.0].into();
        let tau = 2.0 * std::f64::consts::PI;
        assert_eq!(trajectory_error(&*model, &theta, &theta, (0.0, tau), 100).unwrap(), 0.0);
        let eps = 1e-2;
        let e = trajectory_error(&*model, &vec![1.0 + eps, 0.0].into(), &theta, (0.0, tau), 2001)
            .unwrap();
        assert!((e - tau * eps * eps).abs() <= 1e-8, "{e}");
    }

    #[derive(Debug)]
    struct Constant {
        layout: ParamLayout,
    }

    impl OdeModel for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn layout(&self) -> &ParamLayout {
            &self.layout
        }
        fn rhs(&self, _: &[f64], _: &[f64], _: f64, out: &mut [f64]) -> Result<()> {
            out.fill(0.0);
            Ok(())
        }
        fn state_jacobian(&self, _: &[f64], _: &[f64], _: f64, out: &mut [f64]) -> Result<()> {
            out.fill(0.0);
            Ok(())
        }
        fn param_jacobian(&self, _: &[f64], _: &[f64], _: f64, _: &mut [f64]) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn sampled_variance_vanishes_for_exact_solver() {
        let model: Arc<dyn OdeModel> = Arc::new(Constant {
            layout: ParamLayout::new(&[("x(0)", 0)], &[], vec![0.0]).unwrap(),
        });
        let times = protocol_times(1.0, 1, 5, 0.0);
        let data = ObservationSet::new(times, vec![vec![1.0]; 5], vec![vec![1.0]], vec![1.0]).unwrap();
        let p = EstimationProblem::new(model, data, Scheme::Rk4, 0.25).unwrap();
        let s = probabilistic_weight_estimate(&p, &vec![1.0].into(), 8, 3).unwrap();
        assert!(s.iter().flatten().all(|&v| v == 0.0));
        assert!(probabilistic_weight_estimate(&p, &vec![1.0].into(), 1, 3).unwrap_err().is_config());
    }

    #[test]
    fn sampled_variance_matches_linear_propagation() {
        // For a linear model the perturbed recursion is Gaussian, so the
        // expected covariance is Σ_n M^(k−n) diag(e_n²) M^(k−n)ᵀ.
        let (h, dt, k) = (0.5, 0.05, 20);
        let values = vec![vec![0.0, 0.0]; k];
        let p = ho_problem(Scheme::ExplicitEuler, dt, h, k, values);
        let theta: ParameterVector = vec![1.0, 0.0].into();
        let s2 = probabilistic_weight_estimate(&p, &theta, 2000, 9).unwrap();
        let one = ho_step_matrix(Scheme::ExplicitEuler, dt, dt).unwrap();
        let halves = ho_step_matrix(Scheme::ExplicitEuler, 0.5 * dt, dt).unwrap();
        let per_obs = (h / dt).round() as usize;
        let mut x = Vector2::new(1.0, 0.0);
        let mut cov = Matrix2::zeros();
        for n in 0..k * per_obs {
            let e = (one * x - halves * x).abs();
            cov = one * cov * one.transpose() + Matrix2::from_diagonal(&e.component_mul(&e));
            x = one * x;
            if (n + 1) % per_obs == 0 {
                let i = (n + 1) / per_obs - 1;
                for c in 0..2 {
                    let rel = s2[i][c] / cov[(c, c)];
                    assert!((rel - 1.0).abs() < 0.15, "k={i} c={c}: {rel}");
                }
            }
        }
        assert!(s2[k - 1][0] + s2[k - 1][1] > s2[4][0] + s2[4][1]);
    }

    #[test]
    fn sampled_variance_is_reproducible() {
        let values = vec![vec![0.0, 0.0]; 8];
        let p = ho_problem(Scheme::Heun, 0.1, 0.5, 8, values);
        let theta: ParameterVector = vec![1.0, 0.0].into();
        let a = probabilistic_weight_estimate(&p, &theta, 16, 5).unwrap();
        let b = probabilistic_weight_estimate(&p, &theta, 16, 5).unwrap();
        assert_eq!(a, b);
    }
}
