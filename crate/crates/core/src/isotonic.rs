//! Weight update for the ordered discretization-error variances.
//!
//! For one observed component the sub-problem is
//! `min Σ_k (−log w_k + w_k r_k²)` subject to `0 < w_K ≤ … ≤ w_1 ≤ cap`.
//! Writing `μ_k = −w_k` turns it into isotonic estimation of Gamma scale
//! parameters, solved by the slopes of the greatest convex minorant of the
//! cumulative sums of `r²`. Pool-adjacent-violators computes those slopes,
//! and the cap is applied afterwards by truncation.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::estimate::WeightMatrix;

/// Output of [`gcm_slopes`].
#[derive(Debug, Clone, PartialEq)]
pub struct IsotonicResult {
    /// Nondecreasing GCM increments, one per observation.
    pub slopes: Vec<f64>,
    /// `μ_k = −1/slope_k`; `−∞` where the slope is zero.
    pub mu: Vec<f64>,
    /// Pooled level sets in order.
    pub blocks: Vec<Range<usize>>,
}

/// Slopes of the greatest convex minorant of `S_k = r_1² + … + r_k²`.
pub fn gcm_slopes(sq_residuals: &[f64]) -> Result<IsotonicResult> {
    if sq_residuals.is_empty() {
        return Err(Error::config("isotonic update needs at least one residual"));
    }
    if let Some(i) = sq_residuals.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::config(format!(
            "squared residual {i} is negative or not finite ({})",
            sq_residuals[i]
        )));
    }

    // (sum, count, start) per block.
    let mut stack: Vec<(f64, usize, usize)> = Vec::with_capacity(sq_residuals.len());
    for (i, &v) in sq_residuals.iter().enumerate() {
        stack.push((v, 1, i));
        while stack.len() >= 2 {
            let (sr, nr, _) = stack[stack.len() - 1];
            let (sl, nl, start) = stack[stack.len() - 2];
            // Left mean ≥ right mean, without dividing.
            if sl * nr as f64 >= sr * nl as f64 {
                stack.pop();
                let top = stack.last_mut().expect("two blocks present");
                *top = (sl + sr, nl + nr, start);
            } else {
                break;
            }
        }
    }

    let mut slopes = Vec::with_capacity(sq_residuals.len());
    let mut blocks = Vec::with_capacity(stack.len());
    for &(sum, n, start) in &stack {
        let mean = sum / n as f64;
        slopes.extend(std::iter::repeat_n(mean, n));
        blocks.push(start..start + n);
    }
    // Block means are nondecreasing by construction up to rounding in the
    // final division; enforce it exactly.
    for k in 1..slopes.len() {
        if slopes[k] < slopes[k - 1] {
            slopes[k] = slopes[k - 1];
        }
    }
    let mu = slopes.iter().map(|&s| -1.0 / s).collect();
    Ok(IsotonicResult { slopes, mu, blocks })
}

/// Optimal weights for fixed residuals.
///
/// `sq_residuals` is `K×J` (row `k` holds `r_{k,·}²`); `caps[j] = 1/γ̃_j²`.
/// Each column becomes `w_{k,j} = −max(μ_{k,j}, −caps_j)`, i.e.
/// `min(1/slope, cap)`.
pub fn update_weights(sq_residuals: &[Vec<f64>], caps: &[f64]) -> Result<WeightMatrix> {
    let k = sq_residuals.len();
    let j = caps.len();
    if k == 0 {
        return Err(Error::config("isotonic update needs at least one observation"));
    }
    if let Some(c) = caps.iter().position(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::config(format!("weight cap {c} must be positive and finite")));
    }
    if sq_residuals.iter().any(|row| row.len() != j) {
        return Err(Error::config("squared residual rows must have one entry per cap"));
    }
    let mut w = vec![0.0; k * j];
    let mut column = vec![0.0; k];
    for (c, &cap) in caps.iter().enumerate() {
        for (dst, row) in column.iter_mut().zip(sq_residuals) {
            *dst = row[c];
        }
        let iso = gcm_slopes(&column)?;
        for (kk, &mu) in iso.mu.iter().enumerate() {
            w[kk * j + c] = -mu.max(-cap);
        }
    }
    WeightMatrix::new(k, w, caps.to_vec())
}
