//! BFGS with an inverse-Hessian update and backtracking line search.
//!
//! Backtracking uses safeguarded quadratic interpolation: each rejected
//! trial step is reduced by a factor in `[0.1, 0.5]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const CURVATURE_C2: f64 = 0.9;
const SHRINK: f64 = 0.5;
const MIN_SHRINK: f64 = 0.1;
const MAX_BACKTRACKS: usize = 60;
const MAX_EXPANSIONS: usize = 10;

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    StepTolerance,
    NoDescent,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfgsReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsSettings {
    /// Stop when `‖g‖_∞ ≤ gtol·max(1, |f|)`.
    pub gtol: f64,
    /// Stop when `‖Δx‖_∞ ≤ step_tol·max(1, ‖x‖_∞)`.
    pub step_tol: f64,
    pub max_iter: usize,
}

/// Evaluation outcome; `None` marks a point where the objective is undefined
/// (non-finite value or a numerical failure inside the model).
type Eval = Option<(f64, DVector<f64>)>;

fn evaluate<F>(f: &mut F, x: &DVector<f64>, count: &mut usize) -> Result<Eval>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    *count += 1;
    match f(x.as_slice()) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => {
            Ok(Some((v, DVector::from_vec(g))))
        }
        Ok(_) => Ok(None),
        Err(e) if e.is_config() => Err(e),
        Err(_) => Ok(None),
    }
}

/// Minimizes `f`, which returns the value and gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], settings: &BfgsSettings) -> Result<BfgsReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evals = 0;
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, mut g) = match f(x.as_slice()) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, DVector::from_vec(g)),
        Ok(_) => return Err(Error::NoFiniteStep),
        Err(e) => return Err(e),
    };
    evals += 1;
    let report = |x: &DVector<f64>, fx: f64, g: &DVector<f64>, it, evals, term| BfgsReport {
        x: x.as_slice().to_vec(),
        f: fx,
        grad_inf_norm: g.amax(),
        iterations: it,
        evaluations: evals,
        termination: term,
    };
    if n == 0 {
        return Ok(report(&x, fx, &g, 0, evals, Termination::Gradient));
    }

    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut any_finite_trial = false;
    for iter in 0..settings.max_iter {
        if g.amax() <= settings.gtol * fx.abs().max(1.0) {
            return Ok(report(&x, fx, &g, iter, evals, Termination::Gradient));
        }
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv.fill_with_identity();
            fresh = true;
            d = -g.clone();
            slope = g.dot(&d);
        }
        let mut alpha = if fresh { (1.0 / d.norm()).min(1.0) } else { 1.0 };

        // Backtracking Armijo search; undefined points shrink the step.
        let mut accepted: Option<(f64, DVector<f64>, f64)> = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + alpha * &d;
            let mut next = alpha * SHRINK;
            if let Some((ft, gt)) = evaluate(&mut f, &trial, &mut evals)? {
                any_finite_trial = true;
                if ft <= fx + ARMIJO_C1 * alpha * slope {
                    accepted = Some((ft, gt, alpha));
                    break;
                }
                // Minimizer of the quadratic through f(0), f'(0) and f(α).
                let q = -slope * alpha * alpha / (2.0 * (ft - fx - slope * alpha));
                next = q.clamp(MIN_SHRINK * alpha, SHRINK * alpha);
            }
            alpha = next;
        }

        let Some((mut ft, mut gt, mut alpha)) = accepted else {
            if !fresh {
                hinv.fill_with_identity();
                fresh = true;
                continue;
            }
            if !any_finite_trial {
                return Err(Error::NoFiniteStep);
            }
            return Ok(report(&x, fx, &g, iter, evals, Termination::NoDescent));
        };

        // Curvature fallback: expand while the step stays too short.
        let mut expansions = 0;
        while gt.dot(&d) < CURVATURE_C2 * slope && expansions < MAX_EXPANSIONS {
            let a2 = alpha * 2.0;
            let trial = &x + a2 * &d;
            match evaluate(&mut f, &trial, &mut evals)? {
                Some((f2, g2)) if f2 <= fx + ARMIJO_C1 * a2 * slope && f2 < ft => {
                    ft = f2;
                    gt = g2;
                    alpha = a2;
                    expansions += 1;
                }
                _ => break,
            }
        }

        let s = alpha * &d;
        let y = &gt - &g;
        let sy = s.dot(&y);
        let x_new = &x + &s;
        let step_small = s.amax() <= settings.step_tol * x_new.amax().max(1.0);

        if sy > 1e-10 * s.norm() * y.norm() {
            if fresh {
                let yy = y.dot(&y);
                hinv.fill_with_identity();
                hinv *= sy / yy;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(s·(Hy)ᵀ + (Hy)·sᵀ) + (ρ²·yᵀHy + ρ) s·sᵀ
            hinv -= rho * (&s * hy.transpose() + &hy * s.transpose());
            hinv += (rho * rho * yhy + rho) * (&s * s.transpose());
            fresh = false;
        }

        x = x_new;
        fx = ft;
        g = gt;
        if step_small {
            return Ok(report(&x, fx, &g, iter + 1, evals, Termination::StepTolerance));
        }
    }
    Ok(report(
        &x,
        fx,
        &g,
        settings.max_iter,
        evals,
        Termination::MaxIterations,
    ))
}
