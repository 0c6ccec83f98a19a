//! Priors on the attenuation image (nonnegativity and a smoothed total
//! variation) and on the flat-field (Gamma hyperparameter strategies).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};

/// Upper bound on the squared norm of the 2D forward-difference operator.
pub const DIFF_NORM_SQ_BOUND: f64 = 8.0;

/// Huber-smoothed isotropic TV, weighted by `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    pub delta: f64,
    pub gamma: f64,
}

impl TvConfig {
    pub fn new(delta: f64, gamma: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("Huber delta must be positive, got {delta}"));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return invalid(format!("TV weight must be nonnegative, got {gamma}"));
        }
        Ok(Self { delta, gamma })
    }

    /// Lipschitz constant of the gradient of `gamma * TV_delta`.
    pub fn lipschitz(&self) -> f64 {
        self.gamma * DIFF_NORM_SQ_BOUND / self.delta
    }
}

/// Huber function and its derivative.
pub fn huber(t: f64, delta: f64) -> (f64, f64) {
    let a = t.abs();
    if a <= delta {
        (t * t / (2.0 * delta), t / delta)
    } else {
        (a - 0.5 * delta, t.signum())
    }
}

/// `TV_delta` of an `n x n` row-major image and its gradient (unweighted).
///
/// Differences are forward differences with the last row and column set to
/// zero, i.e. Neumann boundary conditions.
pub fn tv_eval_grad(values: &[f64], n: usize, delta: f64) -> Result<(f64, Vec<f64>)> {
    if values.len() != n * n {
        return mismatch(format!("image has {} values, expected {}", values.len(), n * n));
    }
    if !(delta > 0.0) {
        return invalid(format!("Huber delta must be positive, got {delta}"));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let k = r * n + c;
            let dv = if r + 1 < n { values[k + n] - values[k] } else { 0.0 };
            let dh = if c + 1 < n { values[k + 1] - values[k] } else { 0.0 };
            let norm = dv.hypot(dh);
            let (val, _) = huber(norm, delta);
            total += val;
            let scale = if norm <= delta { 1.0 / delta } else { 1.0 / norm };
            let (wv, wh) = (dv * scale, dh * scale);
            if r + 1 < n {
                grad[k + n] += wv;
                grad[k] -= wv;
            }
            if c + 1 < n {
                grad[k + 1] += wh;
                grad[k] -= wh;
            }
        }
    }
    Ok((total, grad))
}

pub fn project_nonneg(values: &mut [f64]) {
    for v in values {
        *v = v.max(0.0);
    }
}

/// How the Gamma(alpha, beta) flat-field hyperparameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FlatPriorStrategy {
    /// alpha = 1, beta = 0.
    Uniform,
    /// alpha = 1/2, beta = 0.
    Jeffreys,
    /// alpha = 1 + beta * v_f, i.e. the prior mode sits at the flat-field ML
    /// estimate and beta controls its weight.
    FlatEmphasis { beta: f64 },
    /// Empirical Bayes on the flat-field samples alone.
    TypeII,
}

/// Result of a hyperparameter strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum FlatPrior {
    Gamma { alpha: Vec<f64>, beta: Vec<f64> },
    /// Zero-variance prior at the given flat-field; the joint model then
    /// reduces to reconstruction with that flat-field held fixed.
    PointMass { v: Vec<f64> },
}

impl FlatPrior {
    pub fn is_point_mass(&self) -> bool {
        matches!(self, FlatPrior::PointMass { .. })
    }
}

pub fn make_hyperparams(strategy: FlatPriorStrategy, v_f: &[f64]) -> Result<FlatPrior> {
    let r = v_f.len();
    Ok(match strategy {
        FlatPriorStrategy::Uniform => FlatPrior::Gamma {
            alpha: vec![1.0; r],
            beta: vec![0.0; r],
        },
        FlatPriorStrategy::Jeffreys => FlatPrior::Gamma {
            alpha: vec![0.5; r],
            beta: vec![0.0; r],
        },
        FlatPriorStrategy::FlatEmphasis { beta } => {
            if !(beta >= 0.0 && beta.is_finite()) {
                return invalid(format!("beta must be nonnegative and finite, got {beta}"));
            }
            FlatPrior::Gamma {
                alpha: v_f.iter().map(|&v| 1.0 + beta * v).collect(),
                beta: vec![beta; r],
            }
        }
        // kappa' < 0 for every alpha > 0 whenever a detector has counts, so
        // the evidence keeps improving as alpha -> infinity with the mean
        // pinned at v_f: the limit is a point mass.
        FlatPriorStrategy::TypeII => FlatPrior::PointMass { v: v_f.to_vec() },
    })
}

/// Negative log evidence of the flat-field counts of one detector as a
/// function of the Gamma shape `alpha` (rate profiled out), with first and
/// second derivatives. `k` is the detector's total flat count.
pub fn type2_kappa(alpha: f64, k: u64) -> Result<(f64, f64, f64)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    let kf = k as f64;
    let (mut sum_log, mut sum_inv, mut sum_inv2) = (0.0, 0.0, 0.0);
    for l in 0..k {
        let t = alpha + l as f64;
        sum_log += t.ln();
        sum_inv += 1.0 / t;
        sum_inv2 += 1.0 / (t * t);
    }
    let k_term = if k == 0 { 0.0 } else { kf * (kf / (alpha + kf)).ln() };
    let kappa = -sum_log - alpha * (alpha / (alpha + kf)).ln() - k_term;
    let d1 = -sum_inv + (kf / alpha).ln_1p();
    let d2 = sum_inv2 - kf / (alpha * (alpha + kf));
    Ok((kappa, d1, d2))
}
