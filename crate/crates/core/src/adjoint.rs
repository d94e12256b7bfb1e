//! Exact gradients of the weighted least-squares objective by a discrete
//! adjoint sweep.
//!
//! The forward solution is computed on the augmented state `z = (x, u)`
//! where `u` holds the system parameters, so the gradient with respect to
//! every estimated parameter is read off the costate at `t = 0`.
//!
//! For an explicit Runge–Kutta step the costate is propagated by the
//! partner method of the symplectic pairing. Written with the scaled stage
//! costates `μ_i = b_i Λ_i`, one backward step from `λ'` at `t_{n+1}` is
//!
//! ```text
//! μ_i = b_i λ' + Δt Σ_{j>i} a_ji J(X_j)ᵀ μ_j      (i = s, …, 1)
//! λ   = λ' + Δt Σ_i J(X_i)ᵀ μ_i
//! ```
//!
//! which equals the tableau form `(A, B, C)` of [`backward_tableau`]
//! whenever every `b_i` is nonzero, and stays valid when some `b_i = 0`
//! (the midpoint rule). For explicit Euler it is
//! `λ_n = λ_{n+1} + Δt J(x_n)ᵀ λ_{n+1}`.

use crate::error::{Error, Result};
use crate::estimate::{ObservationSet, WeightMatrix};
use crate::integrate::{integrate, ButcherTableau, NumericalSolution, Scheme, Stepper, TimeGrid};
use crate::models::{augment_with_parameters, OdeModel, ParameterVector, VectorField};

/// Coefficients used to integrate the adjoint system backwards.
#[derive(Debug, Clone, PartialEq)]
pub enum BackwardTableau {
    /// `(A, B, C)` partnered with an explicit Runge–Kutta tableau.
    RungeKutta {
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
    /// The dedicated costate update partnered with Störmer–Verlet:
    /// `ν_{1/2} = ν' + Δt/2 λ'`, `λ = λ' + Δt ∇_q F(q_{1/2})ᵀ ν_{1/2}`,
    /// `ν = ν_{1/2} + Δt/2 λ`, run from `t_{n+1}` to `t_n`.
    StormerVerlet,
}

impl BackwardTableau {
    /// Largest violation of `B_i = b_i`, `b_i A_ij + B_j a_ji = b_i B_i`
    /// and `C_i = c_i` against `forward`.
    pub fn symplectic_defect(&self, forward: &ButcherTableau) -> f64 {
        let BackwardTableau::RungeKutta { a, b, c } = self else {
            return f64::NAN;
        };
        let s = forward.stages();
        let mut defect = 0.0f64;
        for i in 0..s {
            defect = defect.max((b[i] - forward.b[i]).abs());
            defect = defect.max((c[i] - forward.c[i]).abs());
            for j in 0..s {
                let lhs = forward.b[i] * a[i][j] + b[j] * forward.a[j][i];
                defect = defect.max((lhs - forward.b[i] * b[j]).abs());
            }
        }
        defect
    }
}

/// Partner coefficients `A_ij = b_j − b_j a_ji / b_i`, `B = b`, `C = c`.
pub fn backward_tableau(scheme: Scheme) -> Result<BackwardTableau> {
    let Some(fwd) = scheme.tableau() else {
        return Ok(BackwardTableau::StormerVerlet);
    };
    if fwd.b.contains(&0.0) {
        return Err(Error::UnsupportedScheme {
            scheme,
            reason: "a zero weight b_i leaves the partner coefficients undefined",
        });
    }
    let s = fwd.stages();
    let a = (0..s)
        .map(|i| {
            (0..s)
                .map(|j| fwd.b[j] - fwd.b[j] * fwd.a[j][i] / fwd.b[i])
                .collect()
        })
        .collect();
    Ok(BackwardTableau::RungeKutta {
        a,
        b: fwd.b.clone(),
        c: fwd.c.clone(),
    })
}

/// `∇_x R̃_k = −2 Hᵀ diag(w_k) r_k`, added into the first `M` entries of `lambda`.
fn inject(data: &ObservationSet, weights: &WeightMatrix, k: usize, x: &[f64], lambda: &mut [f64]) {
    let hx = data.observe(x);
    for (j, row) in data.h().iter().enumerate() {
        let coef = -2.0 * weights.get(k, j) * (data.value(k)[j] - hx[j]);
        if coef != 0.0 {
            for (l, hv) in lambda.iter_mut().zip(row) {
                *l += coef * hv;
            }
        }
    }
}

/// `out = Jᵀ v` for a row-major square `J`.
pub(crate) fn jt_mul(jac: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    out.fill(0.0);
    for (r, &vr) in v.iter().enumerate() {
        if vr != 0.0 {
            for (o, jv) in out.iter_mut().zip(&jac[r * n..(r + 1) * n]) {
                *o += jv * vr;
            }
        }
    }
}

struct Sweep<'a> {
    field: &'a dyn VectorField,
    stepper: Stepper,
    dim: usize,
    jac: Vec<f64>,
    mu: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    scratch: Vec<f64>,
}

impl<'a> Sweep<'a> {
    fn new(field: &'a dyn VectorField, scheme: Scheme) -> Result<Self> {
        let stepper = Stepper::new(scheme, field)?;
        let dim = field.dim();
        let s = stepper.tableau().map_or(1, ButcherTableau::stages);
        Ok(Sweep {
            field,
            stepper,
            dim,
            jac: vec![0.0; dim * dim],
            mu: vec![vec![0.0; dim]; s],
            v: vec![vec![0.0; dim]; s],
            scratch: vec![0.0; dim],
        })
    }

    /// Replaces `lambda` (costate at `t_n + Δt`) by the costate at `t_n`.
    fn step_back(&mut self, z: &[f64], t: f64, dt: f64, lambda: &mut [f64]) -> Result<()> {
        // Rebuild the stage states of this step from the stored node.
        self.stepper.step(self.field, z, t, dt, &mut self.scratch)?;
        match self.stepper.tableau() {
            Some(tab) => {
                let s = tab.stages();
                for i in (0..s).rev() {
                    let (head, tail) = self.mu.split_at_mut(i + 1);
                    let mu_i = &mut head[i];
                    for (m, l) in mu_i.iter_mut().zip(lambda.iter()) {
                        *m = tab.b[i] * l;
                    }
                    for (off, vj) in self.v[i + 1..].iter().enumerate() {
                        let a = tab.a[i + 1 + off][i];
                        if a != 0.0 {
                            for (m, vv) in mu_i.iter_mut().zip(vj) {
                                *m += dt * a * vv;
                            }
                        }
                    }
                    let _ = tail;
                    let stage = &self.stepper.workspace().stages[i];
                    self.field.jacobian(stage, t + tab.c[i] * dt, &mut self.jac)?;
                    jt_mul(&self.jac, &self.mu[i], &mut self.v[i]);
                }
                for vi in &self.v[..s] {
                    for (l, vv) in lambda.iter_mut().zip(vi) {
                        *l += dt * vv;
                    }
                }
            }
            None => {
                let n = self.field.position_dim().expect("checked by Stepper");
                let half = 0.5 * dt;
                // ν_{1/2} on the p-block, zero elsewhere.
                let nu_half = &mut self.mu[0];
                nu_half.fill(0.0);
                for i in 0..n {
                    nu_half[n + i] = lambda[n + i] + half * lambda[i];
                }
                let stage = &self.stepper.workspace().stages[0];
                self.field.jacobian(stage, t + half, &mut self.jac)?;
                jt_mul(&self.jac, &self.mu[0], &mut self.v[0]);
                // q-block and trailing constant block pick up Δt Jᵀν_{1/2};
                // the p-block contribution is zero for (q, p) systems.
                for (idx, l) in lambda.iter_mut().enumerate() {
                    if idx < n || idx >= 2 * n {
                        *l += dt * self.v[0][idx];
                    }
                }
                for i in 0..n {
                    lambda[n + i] = self.mu[0][n + i] + half * lambda[i];
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(
    model: &dyn OdeModel,
    params: &ParameterVector,
    weights: &WeightMatrix,
    data: &ObservationSet,
    solution: &NumericalSolution,
) -> Result<()> {
    params.validate_for(model)?;
    if !solution.is_augmented() {
        return Err(Error::config(
            "the gradient needs a solution of the parameter-augmented model",
        ));
    }
    if solution.params() != params.as_slice() {
        return Err(Error::config("solution was computed at different parameters"));
    }
    let k = data.len();
    if solution.obs_index().len() != k || solution.grid().times() != data.times() {
        return Err(Error::config("solution and observations use different time points"));
    }
    if weights.rows() != k || weights.cols() != data.n_components() {
        return Err(Error::config(format!(
            "weights are {}×{}, observations need {}×{}",
            weights.rows(),
            weights.cols(),
            k,
            data.n_components()
        )));
    }
    if data.state_dim() != model.state_dim() {
        return Err(Error::config("observation matrix width differs from the state dimension"));
    }
    Ok(())
}

/// Exact gradient of `R̃(θ) = Σ_k Σ_j w_{k,j} (y_{k,j} − H_j x̃_k(θ))²`.
///
/// `solution` must come from [`integrate_augmented`](crate::integrate::integrate_augmented)
/// at `params`; its scheme and grid define the discretization.
pub fn wls_gradient(
    model: &dyn OdeModel,
    params: &ParameterVector,
    weights: &WeightMatrix,
    data: &ObservationSet,
    solution: &NumericalSolution,
) -> Result<Vec<f64>> {
    check_inputs(model, params, weights, data, solution)?;
    let aug = augment_with_parameters(model);
    let mut sweep = Sweep::new(&aug, solution.scheme())?;
    let dim = sweep.dim;
    let steps: Vec<(f64, f64)> = solution.grid().steps().collect();
    let obs = solution.obs_index();

    let mut lambda = vec![0.0; dim];
    let mut next_obs = obs.len();
    let mut node = steps.len();
    // Injection at the last node seeds the sweep.
    while next_obs > 0 && obs[next_obs - 1] == node {
        next_obs -= 1;
        inject(data, weights, next_obs, solution.state(node), &mut lambda);
    }
    while node > 0 {
        node -= 1;
        let (t, dt) = steps[node];
        sweep
            .step_back(solution.state(node), t, dt, &mut lambda)
            .map_err(|e| Error::Integration {
                node,
                source: Box::new(e),
            })?;
        while next_obs > 0 && obs[next_obs - 1] == node {
            next_obs -= 1;
            inject(data, weights, next_obs, solution.state(node), &mut lambda);
        }
    }

    let layout = model.layout();
    let m = model.state_dim();
    let mut grad = Vec::with_capacity(model.param_dim());
    grad.extend(layout.initial_components().iter().map(|&c| lambda[c]));
    grad.extend_from_slice(&lambda[m..]);
    Ok(grad)
}

/// `R̃(θ)` from a fresh forward integration.
pub fn weighted_sse(
    model: &dyn OdeModel,
    params: &ParameterVector,
    weights: &WeightMatrix,
    data: &ObservationSet,
    scheme: Scheme,
    grid: &TimeGrid,
) -> Result<f64> {
    let sol = integrate(model, params, grid, scheme)?;
    let res = crate::estimate::residuals(data, &sol)?;
    Ok(crate::estimate::weighted_sum_of_squares(&res, weights))
}

/// Central finite-difference gradient of `R̃`, step `step·max(1, |θ_i|)`.
pub fn fd_gradient(
    model: &dyn OdeModel,
    params: &ParameterVector,
    weights: &WeightMatrix,
    data: &ObservationSet,
    scheme: Scheme,
    grid: &TimeGrid,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    params.validate_for(model)?;
    (0..params.len())
        .map(|i| {
            let h = step * params[i].abs().max(1.0);
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.0[i] += h;
            minus.0[i] -= h;
            let fp = weighted_sse(model, &plus, weights, data, scheme, grid)?;
            let fm = weighted_sse(model, &minus, weights, data, scheme, grid)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// Default relative step of [`fd_gradient`].
pub const FD_STEP: f64 = 1e-6;
