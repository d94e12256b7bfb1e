//! Profile-likelihood confidence intervals and the closed-form bias/MSE
//! analysis of the quasi-maximum likelihood estimator on the harmonic
//! oscillator.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Side};
use crate::estimate::{
    irls_with, objective_g, wls_fit_masked, EstimationProblem, FitOptions, FitResult,
    WeightMatrix, WeightUpdate,
};
use crate::integrate::{ho_rotation, ho_step_matrix, Scheme};
use crate::models::ParameterVector;

/// How nuisance quantities are handled when a parameter is pinned.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileWeights {
    /// Re-run IRLS so the weights are maximized jointly with `θ^(−i)`.
    Reoptimize,
    /// Keep these weights and only re-fit `θ^(−i)`.
    Fixed(WeightMatrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub index: usize,
    pub value: f64,
    /// `−g/2` at the constrained optimum.
    pub loglik: f64,
    pub theta: ParameterVector,
}

/// Maximizes the log-likelihood with `θ_i` pinned at `value`, starting from
/// `start` (whose `i`-th entry is overwritten).
pub fn profile_loglik(
    problem: &EstimationProblem,
    start: &ParameterVector,
    i: usize,
    value: f64,
    weights: &ProfileWeights,
    opts: &FitOptions,
) -> Result<ProfilePoint> {
    if i >= start.len() {
        return Err(Error::config(format!(
            "parameter index {i} is out of range for {} parameters",
            start.len()
        )));
    }
    let mut theta = start.clone();
    theta.0[i] = value;
    let mut free = vec![true; theta.len()];
    free[i] = false;
    let (theta, g) = match weights {
        ProfileWeights::Reoptimize => {
            let fit = irls_with(problem, &theta, None, WeightUpdate::Isotonic, &free, opts)?;
            let g = *fit.objective_trace.last().expect("non-empty trace");
            (fit.theta_hat, g)
        }
        ProfileWeights::Fixed(w) => {
            let fit = wls_fit_masked(problem, &theta, w, &free, opts)?;
            let g = objective_g(&problem.residuals(&fit.theta)?, w)?;
            (fit.theta, g)
        }
    };
    Ok(ProfilePoint {
        index: i,
        value,
        loglik: -0.5 * g,
        theta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub index: usize,
    pub name: String,
    pub level: f64,
    pub lower: f64,
    pub estimate: f64,
    pub upper: f64,
    /// `½ χ²₁⁻¹(level)`; an endpoint is where `l̂ − l_i` reaches it.
    pub threshold: f64,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Doublings of the initial offset tried before giving up on a side.
pub const MAX_DOUBLINGS: usize = 40;

/// Default absolute bisection tolerance.
pub const CI_TOL: f64 = 0.01;

/// Likelihood-ratio interval for `θ_i` around the fitted `mle`.
///
/// Each side is bracketed by doubling the offset
/// `max(0.01|θ̂_i|, 1e-3)` until `l̂ − l_i(v)` exceeds the threshold,
/// then bisected until the bracket is narrower than `tol`; the endpoint is
/// the bracket midpoint.
pub fn likelihood_ratio_ci(
    problem: &EstimationProblem,
    mle: &FitResult,
    i: usize,
    level: f64,
    tol: f64,
    weights: &ProfileWeights,
    opts: &FitOptions,
) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level must be in (0, 1), got {level}")));
    }
    if !(tol > 0.0) {
        return Err(Error::config("bisection tolerance must be positive"));
    }
    let theta_hat = &mle.theta_hat;
    if i >= theta_hat.len() {
        return Err(Error::config(format!("parameter index {i} is out of range")));
    }
    let threshold = 0.5 * chi2_quantile(level, 1.0)?;
    let est = theta_hat[i];
    let l_hat = profile_loglik(problem, theta_hat, i, est, weights, opts)?.loglik;
    let drop_at = |v: f64| -> Result<f64> {
        Ok(l_hat - profile_loglik(problem, theta_hat, i, v, weights, opts)?.loglik)
    };

    let side = |sign: f64, side: Side| -> Result<f64> {
        let mut inner = 0.0;
        let mut outer = None;
        let mut d = (0.01 * est.abs()).max(1e-3);
        for _ in 0..MAX_DOUBLINGS {
            if drop_at(est + sign * d)? >= threshold {
                outer = Some(d);
                break;
            }
            inner = d;
            d *= 2.0;
        }
        let mut outer = outer.ok_or(Error::UnboundedInterval {
            index: i,
            side,
            doublings: MAX_DOUBLINGS,
        })?;
        while outer - inner > tol {
            let mid = 0.5 * (inner + outer);
            if drop_at(est + sign * mid)? >= threshold {
                outer = mid;
            } else {
                inner = mid;
            }
        }
        Ok(est + sign * 0.5 * (inner + outer))
    };
    let (lower, upper) = rayon::join(|| side(-1.0, Side::Lower), || side(1.0, Side::Upper));
    Ok(ConfidenceInterval {
        index: i,
        name: problem.model.layout().names()[i].clone(),
        level,
        lower: lower?,
        estimate: est,
        upper: upper?,
        threshold,
    })
}

// ---------------------------------------------------------------------------
// χ² quantile

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_pre = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..1000 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + log_pre).exp()
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (log_pre.exp() * h)
    }
}

/// CDF of χ² with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: f64) -> f64 {
    gamma_p(0.5 * dof, 0.5 * x)
}

/// Inverse of [`chi2_cdf`] by bisection.
pub fn chi2_quantile(p: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || !(dof > 0.0) {
        return Err(Error::config("chi-square quantile needs 0 < p < 1 and dof > 0"));
    }
    let mut hi = dof.max(1.0);
    while chi2_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Harmonic-oscillator analysis

fn normal_inverse(m_tilde: &Matrix2<f64>, k: usize) -> Result<Matrix2<f64>> {
    if k == 0 {
        return Err(Error::config("need at least one observation"));
    }
    let mut sum = Matrix2::zeros();
    let mut mk = Matrix2::identity();
    for _ in 0..k {
        mk = m_tilde * mk;
        sum += mk.transpose() * mk;
    }
    sum.try_inverse().ok_or(Error::Singular("Σ (M̃^k)ᵀ M̃^k"))
}

/// `b = (Σ_k (M̃^k)ᵀM̃^k)⁻¹ Σ_k (M̃^k)ᵀ(M^k − M̃^k) θ` with `M` the exact
/// rotation by `h` and observations at `t_k = kh`, `k = 1..K`.
pub fn ho_bias(m_tilde: &Matrix2<f64>, h: f64, k: usize, theta: &Vector2<f64>) -> Result<Vector2<f64>> {
    let inv = normal_inverse(m_tilde, k)?;
    let m = ho_rotation(h);
    let mut rhs = Vector2::zeros();
    let (mut mk, mut mtk) = (Matrix2::identity(), Matrix2::identity());
    for _ in 0..k {
        mk = m * mk;
        mtk = m_tilde * mtk;
        rhs += mtk.transpose() * (mk - mtk) * theta;
    }
    Ok(inv * rhs)
}

/// `(mse_qml, mse_ml)` with `mse_qml = ‖b‖² + γ² tr(Σ (M̃^k)ᵀM̃^k)⁻¹` and
/// `mse_ml = 2γ²/K`.
pub fn ho_mse(
    m_tilde: &Matrix2<f64>,
    h: f64,
    k: usize,
    theta: &Vector2<f64>,
    gamma_sq: f64,
) -> Result<(f64, f64)> {
    let b = ho_bias(m_tilde, h, k, theta)?;
    let inv = normal_inverse(m_tilde, k)?;
    Ok((b.norm_squared() + gamma_sq * inv.trace(), 2.0 * gamma_sq / k as f64))
}

/// Everything the closed-form analysis produces for one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct HoAnalysis {
    pub m: Matrix2<f64>,
    pub m_tilde: Matrix2<f64>,
    pub k: usize,
    pub theta: Vector2<f64>,
    pub gamma_sq: f64,
    pub bias: Vector2<f64>,
    pub mse_qml: f64,
    pub mse_ml: f64,
}

impl HoAnalysis {
    pub fn new(
        scheme: Scheme,
        dt: f64,
        h: f64,
        k: usize,
        theta: Vector2<f64>,
        gamma_sq: f64,
    ) -> Result<Self> {
        let m_tilde = ho_step_matrix(scheme, dt, h)?;
        let bias = ho_bias(&m_tilde, h, k, &theta)?;
        let (mse_qml, mse_ml) = ho_mse(&m_tilde, h, k, &theta, gamma_sq)?;
        Ok(HoAnalysis {
            m: ho_rotation(h),
            m_tilde,
            k,
            theta,
            gamma_sq,
            bias,
            mse_qml,
            mse_ml,
        })
    }

    /// `A_k = M̃^k` for `k = 1..K`.
    pub fn powers(&self) -> Vec<Matrix2<f64>> {
        let mut out = Vec::with_capacity(self.k);
        let mut mk = Matrix2::identity();
        for _ in 0..self.k {
            mk = self.m_tilde * mk;
            out.push(mk);
        }
        out
    }
}
