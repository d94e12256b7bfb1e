//! Fixed-step one-step integrators with sub-stepping between observation
//! times, and an adaptive Dormand–Prince 5(4) reference solver.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    augment_with_parameters, FixedParams, HarmonicOscillator, OdeModel, ParameterVector,
    VectorField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[serde(rename = "euler", alias = "explicit_euler")]
    ExplicitEuler,
    Midpoint,
    Heun,
    Rk4,
    StormerVerlet,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::ExplicitEuler,
        Scheme::Midpoint,
        Scheme::Heun,
        Scheme::Rk4,
        Scheme::StormerVerlet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::ExplicitEuler => "euler",
            Scheme::Midpoint => "midpoint",
            Scheme::Heun => "heun",
            Scheme::Rk4 => "rk4",
            Scheme::StormerVerlet => "stormer_verlet",
        }
    }

    /// Classical order of accuracy.
    pub fn order(self) -> u32 {
        match self {
            Scheme::ExplicitEuler => 1,
            Scheme::Midpoint | Scheme::Heun | Scheme::StormerVerlet => 2,
            Scheme::Rk4 => 4,
        }
    }

    /// Butcher tableau of the explicit Runge–Kutta schemes; `None` for
    /// Störmer–Verlet, which is a partitioned method.
    pub fn tableau(self) -> Option<ButcherTableau> {
        let t = match self {
            Scheme::ExplicitEuler => ButcherTableau {
                a: vec![vec![0.0]],
                b: vec![1.0],
                c: vec![0.0],
            },
            Scheme::Midpoint => ButcherTableau {
                a: vec![vec![0.0, 0.0], vec![0.5, 0.0]],
                b: vec![0.0, 1.0],
                c: vec![0.0, 0.5],
            },
            Scheme::Heun => ButcherTableau {
                a: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
                b: vec![0.5, 0.5],
                c: vec![0.0, 1.0],
            },
            Scheme::Rk4 => ButcherTableau {
                a: vec![
                    vec![0.0, 0.0, 0.0, 0.0],
                    vec![0.5, 0.0, 0.0, 0.0],
                    vec![0.0, 0.5, 0.0, 0.0],
                    vec![0.0, 0.0, 1.0, 0.0],
                ],
                b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
                c: vec![0.0, 0.5, 0.5, 1.0],
            },
            Scheme::StormerVerlet => return None,
        };
        Some(t)
    }

    /// Errors unless the scheme can integrate `field`.
    pub fn check_applicable(self, field: &dyn VectorField) -> Result<()> {
        if self == Scheme::StormerVerlet {
            match field.position_dim() {
                Some(n) if n > 0 && 2 * n <= field.dim() => {}
                _ => {
                    return Err(Error::UnsupportedScheme {
                        scheme: self,
                        reason: "the model is not in (q, p) partitioned form",
                    })
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scheme `{s}`")))
    }
}

/// Explicit Runge–Kutta coefficients; `a` is strictly lower triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

/// Observation times plus the number of internal steps in each interval.
///
/// Integration starts at `t = 0`. When the first observation time is
/// positive, `[0, t_1]` is the first interval; otherwise `t_1 = 0` is the
/// initial node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    substeps: Vec<usize>,
}

impl TimeGrid {
    /// The same number of sub-steps in every interval.
    pub fn new(times: Vec<f64>, substeps_per_interval: usize) -> Result<Self> {
        Self::validate_times(&times)?;
        if substeps_per_interval == 0 {
            return Err(Error::config("sub-step count must be positive"));
        }
        let n = Self::interval_count(&times);
        Ok(TimeGrid {
            times,
            substeps: vec![substeps_per_interval; n],
        })
    }

    /// Sub-steps derived from an internal step `dt`, which must divide every
    /// interval (relative mismatch below 1e-9).
    pub fn with_step(times: Vec<f64>, dt: f64) -> Result<Self> {
        Self::validate_times(&times)?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config(format!("step size must be positive, got {dt}")));
        }
        let mut substeps = Vec::new();
        let mut prev = 0.0;
        for &t in &times {
            let len = t - prev;
            if len > 0.0 {
                let ratio = len / dt;
                let n = ratio.round();
                if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
                    return Err(Error::config(format!(
                        "step size {dt} does not divide the interval [{prev}, {t}]"
                    )));
                }
                substeps.push(n as usize);
            }
            prev = t;
        }
        Ok(TimeGrid { times, substeps })
    }

    fn validate_times(times: &[f64]) -> Result<()> {
        if times.is_empty() {
            return Err(Error::config("at least one observation time is required"));
        }
        if !(times[0] >= 0.0) {
            return Err(Error::config("observation times must be nonnegative"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("observation times must be finite"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("observation times must be strictly increasing"));
        }
        Ok(())
    }

    fn interval_count(times: &[f64]) -> usize {
        if times[0] > 0.0 {
            times.len()
        } else {
            times.len() - 1
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn substeps(&self) -> &[usize] {
        &self.substeps
    }

    pub fn node_count(&self) -> usize {
        1 + self.substeps.iter().sum::<usize>()
    }

    /// Node index of each observation time.
    pub fn obs_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.times.len());
        let mut node = 0;
        let mut intervals = self.substeps.iter();
        if self.times[0] > 0.0 {
            node += intervals.next().copied().unwrap_or(0);
        }
        idx.push(node);
        for &n in intervals {
            node += n;
            idx.push(node);
        }
        idx
    }

    /// `(t_n, Δt)` for every internal step in order.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let head = (self.times[0] > 0.0).then_some(0.0);
        let starts = head.into_iter().chain(self.times.iter().copied());
        starts
            .zip(self.times.iter().copied().skip(usize::from(head.is_none())))
            .zip(&self.substeps)
            .flat_map(|((a, b), &n)| {
                let dt = (b - a) / n as f64;
                (0..n).map(move |i| (a + i as f64 * dt, dt))
            })
    }
}

/// States at every internal node of a fixed-step integration.
#[derive(Debug, Clone)]
pub struct NumericalSolution {
    dim: usize,
    states: Vec<f64>,
    obs_index: Vec<usize>,
    scheme: Scheme,
    grid: TimeGrid,
    params: Vec<f64>,
    augmented: bool,
}

impl NumericalSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn state(&self, node: usize) -> &[f64] {
        &self.states[node * self.dim..(node + 1) * self.dim]
    }

    /// `x̃_k`, the state at the `k`-th observation time (0-based).
    pub fn observed(&self, k: usize) -> &[f64] {
        self.state(self.obs_index[k])
    }

    pub fn obs_index(&self) -> &[usize] {
        &self.obs_index
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Whether the states carry the appended system-parameter block.
    pub fn is_augmented(&self) -> bool {
        self.augmented
    }
}

/// Scratch buffers for one step.
pub(crate) struct StepWorkspace {
    pub(crate) stages: Vec<Vec<f64>>,
    pub(crate) slopes: Vec<Vec<f64>>,
}

impl StepWorkspace {
    pub(crate) fn new(dim: usize, stages: usize) -> Self {
        StepWorkspace {
            stages: vec![vec![0.0; dim]; stages.max(1)],
            slopes: vec![vec![0.0; dim]; stages.max(1)],
        }
    }
}

pub(crate) struct Stepper {
    tableau: Option<ButcherTableau>,
    ws: StepWorkspace,
}

impl Stepper {
    pub(crate) fn new(scheme: Scheme, field: &dyn VectorField) -> Result<Self> {
        scheme.check_applicable(field)?;
        let tableau = scheme.tableau();
        let s = tableau.as_ref().map_or(1, ButcherTableau::stages);
        Ok(Stepper {
            tableau,
            ws: StepWorkspace::new(field.dim(), s),
        })
    }

    /// Writes the stage states `X_i` of the step from `z` into the
    /// workspace; for Störmer–Verlet the single stage is `(q_{n+1/2}, p_n)`.
    pub(crate) fn step(
        &mut self,
        field: &dyn VectorField,
        z: &[f64],
        t: f64,
        dt: f64,
        out: &mut [f64],
    ) -> Result<()> {
        match &self.tableau {
            Some(tab) => rk_step(field, tab, z, t, dt, out, &mut self.ws),
            None => {
                let n = field.position_dim().expect("checked in Stepper::new");
                sv_step(field, n, z, t, dt, out, &mut self.ws)
            }
        }
    }

    pub(crate) fn workspace(&self) -> &StepWorkspace {
        &self.ws
    }

    pub(crate) fn tableau(&self) -> Option<&ButcherTableau> {
        self.tableau.as_ref()
    }
}

fn rk_step(
    field: &dyn VectorField,
    tab: &ButcherTableau,
    z: &[f64],
    t: f64,
    dt: f64,
    out: &mut [f64],
    ws: &mut StepWorkspace,
) -> Result<()> {
    let s = tab.stages();
    for i in 0..s {
        let (done, rest) = ws.slopes.split_at_mut(i);
        let stage = &mut ws.stages[i];
        stage.copy_from_slice(z);
        for (j, k) in done.iter().enumerate() {
            let a = tab.a[i][j];
            if a != 0.0 {
                for (x, kv) in stage.iter_mut().zip(k) {
                    *x += dt * a * kv;
                }
            }
        }
        field.eval(stage, t + tab.c[i] * dt, &mut rest[0])?;
    }
    out.copy_from_slice(z);
    for (b, k) in tab.b.iter().zip(&ws.slopes) {
        if *b != 0.0 {
            for (x, kv) in out.iter_mut().zip(k) {
                *x += dt * b * kv;
            }
        }
    }
    Ok(())
}

fn sv_step(
    field: &dyn VectorField,
    n: usize,
    z: &[f64],
    t: f64,
    dt: f64,
    out: &mut [f64],
    ws: &mut StepWorkspace,
) -> Result<()> {
    let half = 0.5 * dt;
    let mid = &mut ws.stages[0];
    mid.copy_from_slice(z);
    for i in 0..n {
        mid[i] = z[i] + half * z[n + i];
    }
    let force = &mut ws.slopes[0];
    field.eval(mid, t + half, force)?;
    out.copy_from_slice(mid);
    for i in 0..n {
        out[n + i] = z[n + i] + dt * force[n + i];
    }
    for i in 0..n {
        out[i] = mid[i] + half * out[n + i];
    }
    Ok(())
}

/// One step of `scheme` for the model at `params`.
pub fn step(
    scheme: Scheme,
    model: &dyn OdeModel,
    state: &[f64],
    params: &ParameterVector,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {dt}")));
    }
    params.validate_for(model)?;
    if state.len() != model.state_dim() {
        return Err(Error::config("state has the wrong dimension"));
    }
    let field = FixedParams::new(model, params);
    let mut stepper = Stepper::new(scheme, &field)?;
    let mut out = vec![0.0; state.len()];
    stepper.step(&field, state, t, dt, &mut out)?;
    Ok(out)
}

/// Integrates any vector field from `z0` over the grid.
pub fn integrate_field(
    field: &dyn VectorField,
    z0: Vec<f64>,
    grid: &TimeGrid,
    scheme: Scheme,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let dim = field.dim();
    assert_eq!(z0.len(), dim);
    let mut stepper = Stepper::new(scheme, field)?;
    let nodes = grid.node_count();
    let mut states = Vec::with_capacity(nodes * dim);
    states.extend_from_slice(&z0);
    let mut next = vec![0.0; dim];
    for (n, (t, dt)) in grid.steps().enumerate() {
        let cur = &states[n * dim..(n + 1) * dim];
        stepper
            .step(field, cur, t, dt, &mut next)
            .map_err(|e| Error::Integration {
                node: n,
                source: Box::new(e),
            })?;
        states.extend_from_slice(&next);
    }
    Ok((states, grid.obs_index()))
}

/// Fixed-step integration of the model from `x0(θ)`; keeps every node.
pub fn integrate(
    model: &dyn OdeModel,
    params: &ParameterVector,
    grid: &TimeGrid,
    scheme: Scheme,
) -> Result<NumericalSolution> {
    params.validate_for(model)?;
    let field = FixedParams::new(model, params);
    let z0 = model.layout().initial_state(params);
    let (states, obs_index) = integrate_field(&field, z0, grid, scheme)?;
    Ok(NumericalSolution {
        dim: model.state_dim(),
        states,
        obs_index,
        scheme,
        grid: grid.clone(),
        params: params.0.clone(),
        augmented: false,
    })
}

/// Same as [`integrate`] but on the augmented state `(x, θ_S)`; this is the
/// solution the adjoint gradient consumes.
pub fn integrate_augmented(
    model: &dyn OdeModel,
    params: &ParameterVector,
    grid: &TimeGrid,
    scheme: Scheme,
) -> Result<NumericalSolution> {
    params.validate_for(model)?;
    let aug = augment_with_parameters(model);
    let z0 = aug.initial_state(params);
    let (states, obs_index) = integrate_field(&aug, z0, grid, scheme)?;
    Ok(NumericalSolution {
        dim: aug.dim(),
        states,
        obs_index,
        scheme,
        grid: grid.clone(),
        params: params.0.clone(),
        augmented: true,
    })
}

// ---------------------------------------------------------------------------
// Reference solver

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Difference between the 5th- and 4th-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const DP_MAX_STEPS: usize = 50_000_000;

fn scaled_rms(v: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (sum / v.len() as f64).sqrt()
}

/// Adaptive Dormand–Prince 5(4) integration of an arbitrary field, with
/// steps clipped to land exactly on each requested time.
pub fn integrate_reference_field(
    field: &dyn VectorField,
    z0: &[f64],
    times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::config("reference tolerances must be positive"));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0))
        || times.windows(2).any(|w| w[1] < w[0])
    {
        return Err(Error::config(
            "reference output times must be finite, nonnegative and nondecreasing",
        ));
    }
    let n = field.dim();
    let mut y = z0.to_vec();
    let mut t = 0.0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    field.eval(&y, t, &mut k[0])?;

    // Initial step guess.
    let mut h = {
        let d0 = scaled_rms(&y, &y, &y, rtol, atol);
        let d1 = scaled_rms(&k[0], &y, &y, rtol, atol);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        for i in 0..n {
            stage[i] = y[i] + h0 * k[0][i];
        }
        field.eval(&stage, h0, &mut k[1])?;
        let diff: Vec<f64> = k[1].iter().zip(&k[0]).map(|(a, b)| a - b).collect();
        let d2 = scaled_rms(&diff, &y, &y, rtol, atol) / h0;
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dm).powf(0.2)
        };
        (100.0 * h0).min(h1)
    };

    let mut out = Vec::with_capacity(times.len());
    let mut steps = 0usize;
    for &target in times {
        while t < target {
            let remaining = target - t;
            let landing = h >= remaining * (1.0 - 1e-12);
            let dt = if landing { remaining } else { h };
            if dt <= 1e-14 * t.abs().max(1.0) && !landing {
                return Err(Error::AccuracyUnreachable { t, step: dt });
            }
            for s in 1..7 {
                stage.copy_from_slice(&y);
                for j in 0..s {
                    let a = DP_A[s][j];
                    if a != 0.0 {
                        for i in 0..n {
                            stage[i] += dt * a * k[j][i];
                        }
                    }
                }
                let (head, tail) = k.split_at_mut(s);
                let _ = head;
                field.eval(&stage, t + DP_C[s] * dt, &mut tail[0])?;
                if s == 6 {
                    y_new.copy_from_slice(&stage);
                }
            }
            for i in 0..n {
                err[i] = dt * (0..7).map(|j| DP_E[j] * k[j][i]).sum::<f64>();
            }
            let e = scaled_rms(&err, &y, &y_new, rtol, atol);
            steps += 1;
            if steps > DP_MAX_STEPS || !e.is_finite() && dt <= 1e-14 * t.abs().max(1.0) {
                return Err(Error::AccuracyUnreachable { t, step: dt });
            }
            let factor = if e == 0.0 {
                5.0
            } else {
                (0.9 * e.powf(-0.2)).clamp(0.2, 5.0)
            };
            if e <= 1.0 {
                t = if landing { target } else { t + dt };
                y.copy_from_slice(&y_new);
                let (first, rest) = k.split_at_mut(6);
                first[0].copy_from_slice(&rest[0]);
                // Keep the controller's proposal from unclipped steps only.
                if !landing || factor < 1.0 {
                    h = dt * factor;
                }
            } else {
                h = dt * factor.min(1.0);
                if h <= 1e-14 * t.abs().max(1.0) {
                    return Err(Error::AccuracyUnreachable { t, step: h });
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// High-accuracy solution of the model at `times` (starting from `t = 0`).
pub fn integrate_reference(
    model: &dyn OdeModel,
    params: &ParameterVector,
    times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>> {
    params.validate_for(model)?;
    let field = FixedParams::new(model, params);
    let x0 = model.layout().initial_state(params);
    integrate_reference_field(&field, &x0, times, rtol, atol)
}

/// Default reference tolerances.
pub const REFERENCE_RTOL: f64 = 1e-12;
pub const REFERENCE_ATOL: f64 = 1e-12;

/// `M̃ = S^{h/Δt}` where `S` is the one-step matrix of `scheme` on the
/// harmonic oscillator, built column by column from [`step`].
pub fn ho_step_matrix(scheme: Scheme, dt: f64, h: f64) -> Result<Matrix2<f64>> {
    if !(dt > 0.0 && h > 0.0) {
        return Err(Error::config("step and observation interval must be positive"));
    }
    let ratio = h / dt;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio {
        return Err(Error::config(format!("h / dt = {ratio} is not a positive integer")));
    }
    let model = HarmonicOscillator::new();
    let params = ParameterVector::new(vec![0.0, 0.0]);
    let c0 = step(scheme, &model, &[1.0, 0.0], &params, 0.0, dt)?;
    let c1 = step(scheme, &model, &[0.0, 1.0], &params, 0.0, dt)?;
    let one_step = Matrix2::new(c0[0], c1[0], c0[1], c1[1]);
    Ok(one_step.pow(n as u32))
}

/// Exact flow of the harmonic oscillator over time `h`.
pub fn ho_rotation(h: f64) -> Matrix2<f64> {
    Matrix2::new(h.cos(), h.sin(), -h.sin(), h.cos())
}
