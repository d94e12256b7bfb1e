//! ODE model abstraction and the built-in benchmark systems.
//!
//! A model is an autonomous-or-not vector field `dx/dt = f(x, p, t)` together
//! with a [`ParamLayout`] that says how the estimated parameter vector `θ`
//! splits into initial-state parameters (which set components of `x(0)`) and
//! system parameters `p` (which enter `f`). The estimated vector is always
//! ordered `[initial-state parameters..., system parameters...]`.
//!
//! [`AugmentedModel`] folds the system parameters into the state as a
//! constant block so that the adjoint sweep only ever needs gradients with
//! respect to an initial state.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter vector `θ` in the owning model's layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParameterVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Checks the length against `model` and that every entry is finite.
    pub fn validate_for(&self, model: &dyn OdeModel) -> Result<()> {
        let d = model.param_dim();
        if self.0.len() != d {
            return Err(Error::config(format!(
                "model {} expects {d} parameters, got {}",
                model.name(),
                self.0.len()
            )));
        }
        if let Some(i) = self.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("parameter {i} is not finite")));
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &ParameterVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        ParameterVector(v)
    }
}

/// How the estimated parameters map onto a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    names: Vec<String>,
    initial_components: Vec<usize>,
    fixed_initial: Vec<f64>,
}

impl ParamLayout {
    /// `initial` pairs each leading parameter with the state component it
    /// sets; components not listed take their value from `fixed_initial`.
    pub fn new(
        initial: &[(&str, usize)],
        system: &[&str],
        fixed_initial: Vec<f64>,
    ) -> Result<Self> {
        let m = fixed_initial.len();
        let mut seen = vec![false; m];
        for &(name, c) in initial {
            if c >= m || seen[c] {
                return Err(Error::config(format!(
                    "initial-state parameter {name} targets invalid or duplicate component {c}"
                )));
            }
            seen[c] = true;
        }
        let names = initial
            .iter()
            .map(|(n, _)| n.to_string())
            .chain(system.iter().map(|n| n.to_string()))
            .collect();
        Ok(ParamLayout {
            names,
            initial_components: initial.iter().map(|&(_, c)| c).collect(),
            fixed_initial,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.fixed_initial.len()
    }

    pub fn param_dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_initial(&self) -> usize {
        self.initial_components.len()
    }

    pub fn n_system(&self) -> usize {
        self.names.len() - self.initial_components.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// State component set by initial-state parameter `i`.
    pub fn initial_components(&self) -> &[usize] {
        &self.initial_components
    }

    pub fn fixed_initial(&self) -> &[f64] {
        &self.fixed_initial
    }

    /// `x0(θ)`; reads only the initial-state block of `params`.
    pub fn initial_state(&self, params: &[f64]) -> Vec<f64> {
        let mut x0 = self.fixed_initial.clone();
        for (i, &c) in self.initial_components.iter().enumerate() {
            x0[c] = params[i];
        }
        x0
    }

    pub fn system_params<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.n_initial()..]
    }
}

/// A right-hand side `f(x, p, t)` with its analytic derivatives.
///
/// Jacobians are written row-major: `state_jacobian` is `M×M` with entry
/// `(r, c) = ∂f_r/∂x_c`, `param_jacobian` is `M×D_s` with `∂f_r/∂p_c`.
/// `p` is the system-parameter block only.
pub trait OdeModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn layout(&self) -> &ParamLayout;

    fn rhs(&self, x: &[f64], p: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    fn state_jacobian(&self, x: &[f64], p: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    fn param_jacobian(&self, x: &[f64], p: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    /// `Some(n)` when the state is `(q, p)` with `n` positions and
    /// `dq/dt = p`, `dp/dt` independent of `p`. Required by Störmer–Verlet.
    fn position_dim(&self) -> Option<usize> {
        None
    }

    fn state_dim(&self) -> usize {
        self.layout().state_dim()
    }

    fn param_dim(&self) -> usize {
        self.layout().param_dim()
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(component) => Err(Error::Domain {
            component,
            detail: format!("{what} is not finite ({})", values[component]),
        }),
        None => Ok(()),
    }
}

fn check_dims(model: &dyn OdeModel, state: &[f64], params: &[f64]) -> Result<()> {
    if state.len() != model.state_dim() || params.len() != model.param_dim() {
        return Err(Error::config(format!(
            "model {} expects state of length {} and {} parameters, got {} and {}",
            model.name(),
            model.state_dim(),
            model.param_dim(),
            state.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Evaluates `f(x, θ)` with dimension and finiteness checks.
pub fn eval_rhs(
    model: &dyn OdeModel,
    state: &[f64],
    params: &ParameterVector,
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(model, state, params)?;
    let mut out = vec![0.0; model.state_dim()];
    model.rhs(state, model.layout().system_params(params), t, &mut out)?;
    check_finite(&out, "right-hand side")?;
    Ok(out)
}

/// Row-major `M×M` state Jacobian of `f` at `(x, θ)`.
pub fn eval_state_jacobian(
    model: &dyn OdeModel,
    state: &[f64],
    params: &ParameterVector,
    t: f64,
) -> Result<Vec<f64>> {
    check_dims(model, state, params)?;
    let m = model.state_dim();
    let mut out = vec![0.0; m * m];
    model.state_jacobian(state, model.layout().system_params(params), t, &mut out)?;
    check_finite(&out, "state Jacobian")?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Built-in systems

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    Lorenz,
    FitzhughNagumo,
    Kepler,
    HarmonicOscillator,
}

impl BuiltinModel {
    pub const ALL: [BuiltinModel; 4] = [
        BuiltinModel::Lorenz,
        BuiltinModel::FitzhughNagumo,
        BuiltinModel::Kepler,
        BuiltinModel::HarmonicOscillator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinModel::Lorenz => "lorenz",
            BuiltinModel::FitzhughNagumo => "fitzhugh_nagumo",
            BuiltinModel::Kepler => "kepler",
            BuiltinModel::HarmonicOscillator => "harmonic_oscillator",
        }
    }

    /// Parameter values used to generate data in the benchmark experiments.
    pub fn true_parameters(self) -> ParameterVector {
        match self {
            BuiltinModel::Lorenz => vec![-10.0, -1.0, 40.0, 10.0, 28.0, 8.0 / 3.0],
            BuiltinModel::FitzhughNagumo => vec![0.2, 0.2, 3.0],
            BuiltinModel::Kepler => {
                let e: f64 = 0.6;
                vec![1.0 - e, 0.0, 0.0, ((1.0 + e) / (1.0 - e)).sqrt()]
            }
            BuiltinModel::HarmonicOscillator => vec![1.0, 0.0],
        }
        .into()
    }

    pub fn build(self) -> Arc<dyn OdeModel> {
        match self {
            BuiltinModel::Lorenz => Arc::new(Lorenz::new()),
            BuiltinModel::FitzhughNagumo => Arc::new(FitzhughNagumo::new()),
            BuiltinModel::Kepler => Arc::new(Kepler::new()),
            BuiltinModel::HarmonicOscillator => Arc::new(HarmonicOscillator::new()),
        }
    }
}

impl fmt::Display for BuiltinModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuiltinModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BuiltinModel::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown model `{s}`")))
    }
}

/// Looks up a built-in model by name.
pub fn builtin(name: &str) -> Result<Arc<dyn OdeModel>> {
    Ok(name.parse::<BuiltinModel>()?.build())
}

type ModelFactory = Box<dyn Fn() -> Arc<dyn OdeModel> + Send + Sync>;

/// Name → model lookup seeded with the built-ins; custom models are added
/// with [`ModelRegistry::register`].
pub struct ModelRegistry {
    factories: BTreeMap<String, ModelFactory>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut reg = ModelRegistry {
            factories: BTreeMap::new(),
        };
        for m in BuiltinModel::ALL {
            reg.register(m.as_str(), move || m.build());
        }
        reg
    }
}

impl ModelRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> Arc<dyn OdeModel> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn OdeModel>> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::config(format!("unknown model `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

/// Lorenz system; estimates `(x1(0), x2(0), x3(0), σ, ρ, β)`.
#[derive(Debug)]
pub struct Lorenz {
    layout: ParamLayout,
}

impl Lorenz {
    pub fn new() -> Self {
        let layout = ParamLayout::new(
            &[("x1(0)", 0), ("x2(0)", 1), ("x3(0)", 2)],
            &["sigma", "rho", "beta"],
            vec![0.0; 3],
        )
        .expect("static layout");
        Lorenz { layout }
    }
}

impl Default for Lorenz {
    fn default() -> Self {
        Self::new()
    }
}

impl OdeModel for Lorenz {
    fn name(&self) -> &str {
        "lorenz"
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn rhs(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let (sigma, rho, beta) = (p[0], p[1], p[2]);
        out[0] = sigma * (x[1] - x[0]);
        out[1] = x[0] * (rho - x[2]) - x[1];
        out[2] = x[0] * x[1] - beta * x[2];
        Ok(())
    }

    fn state_jacobian(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let (sigma, rho, beta) = (p[0], p[1], p[2]);
        out.copy_from_slice(&[
            -sigma,
            sigma,
            0.0,
            rho - x[2],
            -1.0,
            -x[0],
            x[1],
            x[0],
            -beta,
        ]);
        Ok(())
    }

    fn param_jacobian(&self, x: &[f64], _p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&[x[1] - x[0], 0.0, 0.0, 0.0, x[0], 0.0, 0.0, 0.0, -x[2]]);
        Ok(())
    }
}

/// FitzHugh–Nagumo model with fixed `(V, R)(0) = (−1, −1)`; estimates `(a, b, c)`.
#[derive(Debug)]
pub struct FitzhughNagumo {
    layout: ParamLayout,
}

impl FitzhughNagumo {
    pub fn new() -> Self {
        let layout =
            ParamLayout::new(&[], &["a", "b", "c"], vec![-1.0, -1.0]).expect("static layout");
        FitzhughNagumo { layout }
    }
}

impl Default for FitzhughNagumo {
    fn default() -> Self {
        Self::new()
    }
}

impl OdeModel for FitzhughNagumo {
    fn name(&self) -> &str {
        "fitzhugh_nagumo"
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn rhs(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (p[0], p[1], p[2]);
        out[0] = c * (v - v * v * v / 3.0 + r);
        out[1] = -(v - a + b * r) / c;
        Ok(())
    }

    fn state_jacobian(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let v = x[0];
        let (b, c) = (p[1], p[2]);
        out.copy_from_slice(&[c * (1.0 - v * v), c, -1.0 / c, -b / c]);
        Ok(())
    }

    fn param_jacobian(&self, x: &[f64], p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (p[0], p[1], p[2]);
        out.copy_from_slice(&[
            0.0,
            0.0,
            v - v * v * v / 3.0 + r,
            1.0 / c,
            -r / c,
            (v - a + b * r) / (c * c),
        ]);
        Ok(())
    }
}

/// Smallest admissible `|q|` in the Kepler problem.
pub const KEPLER_MIN_RADIUS: f64 = 1e-12;

/// Planar Kepler problem in `(q1, q2, p1, p2)`; estimates the initial state.
#[derive(Debug)]
pub struct Kepler {
    layout: ParamLayout,
}

impl Kepler {
    pub fn new() -> Self {
        let layout = ParamLayout::new(
            &[("q1(0)", 0), ("q2(0)", 1), ("p1(0)", 2), ("p2(0)", 3)],
            &[],
            vec![0.0; 4],
        )
        .expect("static layout");
        Kepler { layout }
    }

    /// `H = |p|²/2 − 1/|q|`.
    pub fn energy(state: &[f64]) -> f64 {
        let r = state[0].hypot(state[1]);
        0.5 * (state[2] * state[2] + state[3] * state[3]) - 1.0 / r
    }

    fn radius(x: &[f64]) -> Result<f64> {
        let r = x[0].hypot(x[1]);
        if !(r >= KEPLER_MIN_RADIUS) {
            return Err(Error::Domain {
                component: 0,
                detail: format!("Kepler singularity: |q| = {r:e} is below {KEPLER_MIN_RADIUS:e}"),
            });
        }
        Ok(r)
    }
}

impl Default for Kepler {
    fn default() -> Self {
        Self::new()
    }
}

impl OdeModel for Kepler {
    fn name(&self) -> &str {
        "kepler"
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn rhs(&self, x: &[f64], _p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let r = Self::radius(x)?;
        let r3 = r * r * r;
        out[0] = x[2];
        out[1] = x[3];
        out[2] = -x[0] / r3;
        out[3] = -x[1] / r3;
        Ok(())
    }

    fn state_jacobian(&self, x: &[f64], _p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let r = Self::radius(x)?;
        let r2 = r * r;
        let r3 = r2 * r;
        let r5 = r3 * r2;
        let (q1, q2) = (x[0], x[1]);
        let d11 = -1.0 / r3 + 3.0 * q1 * q1 / r5;
        let d12 = 3.0 * q1 * q2 / r5;
        let d22 = -1.0 / r3 + 3.0 * q2 * q2 / r5;
        out.copy_from_slice(&[
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            d11, d12, 0.0, 0.0, //
            d12, d22, 0.0, 0.0,
        ]);
        Ok(())
    }

    fn param_jacobian(&self, _x: &[f64], _p: &[f64], _t: f64, _out: &mut [f64]) -> Result<()> {
        Ok(())
    }

    fn position_dim(&self) -> Option<usize> {
        Some(2)
    }
}

/// `dx/dt = [[0, 1], [−1, 0]] x`; estimates the initial state.
#[derive(Debug)]
pub struct HarmonicOscillator {
    layout: ParamLayout,
}

impl HarmonicOscillator {
    pub fn new() -> Self {
        let layout = ParamLayout::new(&[("x1(0)", 0), ("x2(0)", 1)], &[], vec![0.0; 2])
            .expect("static layout");
        HarmonicOscillator { layout }
    }
}

impl Default for HarmonicOscillator {
    fn default() -> Self {
        Self::new()
    }
}

impl OdeModel for HarmonicOscillator {
    fn name(&self) -> &str {
        "harmonic_oscillator"
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn rhs(&self, x: &[f64], _p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        out[0] = x[1];
        out[1] = -x[0];
        Ok(())
    }

    fn state_jacobian(&self, _x: &[f64], _p: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&[0.0, 1.0, -1.0, 0.0]);
        Ok(())
    }

    fn param_jacobian(&self, _x: &[f64], _p: &[f64], _t: f64, _out: &mut [f64]) -> Result<()> {
        Ok(())
    }

    fn position_dim(&self) -> Option<usize> {
        Some(1)
    }
}

// ---------------------------------------------------------------------------
// Vector fields seen by the integrators

/// A parameter-free vector field `dz/dt = F(z, t)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    /// Row-major `dim×dim` Jacobian.
    fn jacobian(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    /// See [`OdeModel::position_dim`]; trailing components beyond `2n` are
    /// treated as constants.
    fn position_dim(&self) -> Option<usize>;
}

/// A model with its system parameters frozen.
#[derive(Debug, Clone, Copy)]
pub struct FixedParams<'a> {
    model: &'a dyn OdeModel,
    system: &'a [f64],
}

impl<'a> FixedParams<'a> {
    pub fn new(model: &'a dyn OdeModel, params: &'a [f64]) -> Self {
        FixedParams {
            model,
            system: model.layout().system_params(params),
        }
    }
}

impl VectorField for FixedParams<'_> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }

    fn eval(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.model.rhs(z, self.system, t, out)?;
        check_finite(out, "right-hand side")
    }

    fn jacobian(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.model.state_jacobian(z, self.system, t, out)?;
        check_finite(out, "state Jacobian")
    }

    fn position_dim(&self) -> Option<usize> {
        self.model.position_dim()
    }
}

/// The model with system parameters appended to the state as `u`, `du/dt = 0`.
///
/// For a model without system parameters this is the model itself.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedModel<'a> {
    base: &'a dyn OdeModel,
}

/// Builds the augmented system `z = (x, u)`.
pub fn augment_with_parameters(model: &dyn OdeModel) -> AugmentedModel<'_> {
    AugmentedModel { base: model }
}

impl<'a> AugmentedModel<'a> {
    pub fn base(&self) -> &'a dyn OdeModel {
        self.base
    }

    pub fn base_dim(&self) -> usize {
        self.base.state_dim()
    }

    /// `z(0) = (x0(θ), θ_S)`.
    pub fn initial_state(&self, params: &[f64]) -> Vec<f64> {
        let layout = self.base.layout();
        let mut z = layout.initial_state(params);
        z.extend_from_slice(layout.system_params(params));
        z
    }
}

impl VectorField for AugmentedModel<'_> {
    fn dim(&self) -> usize {
        self.base.state_dim() + self.base.layout().n_system()
    }

    fn eval(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let m = self.base.state_dim();
        let (x, u) = z.split_at(m);
        let (fx, fu) = out.split_at_mut(m);
        self.base.rhs(x, u, t, fx)?;
        check_finite(fx, "right-hand side")?;
        fu.fill(0.0);
        Ok(())
    }

    fn jacobian(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let m = self.base.state_dim();
        let ds = self.base.layout().n_system();
        let n = m + ds;
        let (x, u) = z.split_at(m);
        let mut jx = vec![0.0; m * m];
        self.base.state_jacobian(x, u, t, &mut jx)?;
        check_finite(&jx, "state Jacobian")?;
        out.fill(0.0);
        for r in 0..m {
            out[r * n..r * n + m].copy_from_slice(&jx[r * m..(r + 1) * m]);
        }
        if ds > 0 {
            let mut ju = vec![0.0; m * ds];
            self.base.param_jacobian(x, u, t, &mut ju)?;
            check_finite(&ju, "parameter Jacobian")?;
            for r in 0..m {
                out[r * n + m..r * n + n].copy_from_slice(&ju[r * ds..(r + 1) * ds]);
            }
        }
        Ok(())
    }

    fn position_dim(&self) -> Option<usize> {
        self.base.position_dim()
    }
}
