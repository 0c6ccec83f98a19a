//! Data-fidelity terms for the attenuation image.
//!
//! All sinogram-shaped vectors use the ray ordering of the projector: index
//! `j * r + i` for detector `i` and angle `j`.

use crate::error::{invalid, mismatch, Error, Result};
use crate::geometry::{LinearOperator, Sinogram, SinogramKind};
use crate::solver::{power_iteration, power_iteration_sym, PowerConfig};

const EXP_CLAMP: f64 = 700.0;

#[inline]
fn exp_neg(a: f64) -> f64 {
    (-a.clamp(-EXP_CLAMP, EXP_CLAMP)).exp()
}

/// A differentiable objective in the image `u`.
pub trait SmoothObjective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, u: &[f64]) -> Result<f64>;

    /// Writes the gradient into `grad` and returns the value.
    fn value_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Lipschitz constant of the gradient used for step sizing.
    fn lipschitz(&self, power: &PowerConfig) -> f64;

    /// Flat-field estimate implied by `u`, for models that have one.
    fn flatfield(&self, _u: &[f64]) -> Result<Option<FlatFieldEstimate>> {
        Ok(None)
    }
}

/// Hyperparameters of the Gamma flat-field prior and the TV prior.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: f64,
    pub delta: f64,
}

impl HyperParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, gamma: f64, delta: f64) -> Result<Self> {
        if alpha.len() != beta.len() {
            return mismatch(format!("alpha has {} entries, beta {}", alpha.len(), beta.len()));
        }
        if alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return invalid("alpha must be finite and nonnegative");
        }
        if beta.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return invalid("beta must be finite and nonnegative");
        }
        if !(gamma >= 0.0) {
            return invalid(format!("gamma must be nonnegative, got {gamma}"));
        }
        if !(delta > 0.0) {
            return invalid(format!("delta must be positive, got {delta}"));
        }
        Ok(Self { alpha, beta, gamma, delta })
    }

    /// Uniform flat-field prior: alpha = 1, beta = 0.
    pub fn uniform(detectors: usize, gamma: f64, delta: f64) -> Result<Self> {
        Self::new(vec![1.0; detectors], vec![0.0; detectors], gamma, delta)
    }
}

fn check_counts(counts: &Sinogram) -> Result<()> {
    if counts.kind() != SinogramKind::Counts {
        return invalid(format!("expected a counts sinogram, got {}", counts.kind().as_str()));
    }
    Ok(())
}

/// Flat-field ML estimate: the per-detector mean of the flat samples.
pub fn ml_flatfield(flats: &Sinogram) -> Result<Vec<f64>> {
    check_counts(flats)?;
    if flats.cols() == 0 {
        return invalid("at least one flat-field sample is required");
    }
    let s = flats.cols() as f64;
    Ok(flats.row_sums().into_iter().map(|f| f / s).collect())
}

/// Flat-field ML estimate from the object measurements for a given image.
pub fn ml_flatfield_from_object(op: &dyn LinearOperator, u: &[f64], counts: &Sinogram) -> Result<Vec<f64>> {
    check_counts(counts)?;
    check_dims(op, u, counts)?;
    let r = counts.rows();
    let a = op.apply_vec(u);
    let mut num = vec![0.0; r];
    let mut den = vec![0.0; r];
    for (k, (&ak, &yk)) in a.iter().zip(counts.values()).enumerate() {
        num[k % r] += yk;
        den[k % r] += exp_neg(ak);
    }
    Ok(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}

fn check_dims(op: &dyn LinearOperator, u: &[f64], counts: &Sinogram) -> Result<()> {
    if counts.values().len() != op.rows() {
        return mismatch(format!("sinogram has {} entries, operator has {} rows", counts.values().len(), op.rows()));
    }
    if u.len() != op.cols() {
        return mismatch(format!("image has {} entries, operator has {} columns", u.len(), op.cols()));
    }
    Ok(())
}

fn check_operator(op: &dyn LinearOperator, counts: &Sinogram) -> Result<()> {
    if counts.values().len() != op.rows() {
        return mismatch(format!("sinogram has {} entries, operator has {} rows", counts.values().len(), op.rows()));
    }
    Ok(())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return mismatch(format!("{what} has length {got}, expected {want}"));
    }
    Ok(())
}

/// Poisson negative log-likelihood with a fixed flat-field `v`:
/// `sum v_i exp(-[Au]_ij) + y^T A u`. Used with the true flat-field or with
/// its ML estimate from the flats.
pub struct PoissonObjective<'a> {
    op: &'a dyn LinearOperator,
    y: Vec<f64>,
    v: Vec<f64>,
    norm_sq: Option<f64>,
}

impl<'a> PoissonObjective<'a> {
    pub fn new(op: &'a dyn LinearOperator, counts: &Sinogram, v: Vec<f64>) -> Result<Self> {
        check_counts(counts)?;
        check_operator(op, counts)?;
        check_len("flat-field", v.len(), counts.rows())?;
        if v.iter().any(|x| !x.is_finite()) {
            return invalid("flat-field must be finite");
        }
        let bad: Vec<usize> = (0..v.len()).filter(|&i| !(v[i] > 0.0)).collect();
        if !bad.is_empty() {
            return Err(Error::ModelDegenerate {
                detectors: bad,
                reason: "flat-field must be positive".into(),
            });
        }
        Ok(Self {
            op,
            y: counts.values().to_vec(),
            v,
            norm_sq: None,
        })
    }

    /// Supplies a precomputed `||A||^2` so the Lipschitz constant needs no
    /// power iteration.
    pub fn with_operator_norm_sq(mut self, norm_sq: f64) -> Self {
        self.norm_sq = Some(norm_sq);
        self
    }

    pub fn flatfield_values(&self) -> &[f64] {
        &self.v
    }

    fn eval(&self, u: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        check_len("image", u.len(), self.op.cols())?;
        let r = self.v.len();
        let mut a = self.op.apply_vec(u);
        let mut total = 0.0;
        for (k, ak) in a.iter_mut().enumerate() {
            let yhat = self.v[k % r] * exp_neg(*ak);
            total += yhat + self.y[k] * *ak;
            *ak = self.y[k] - yhat;
        }
        if let Some(g) = grad {
            self.op.apply_adjoint(&a, g);
        }
        Ok(total)
    }
}

impl SmoothObjective for PoissonObjective<'_> {
    fn dim(&self) -> usize {
        self.op.cols()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        self.eval(u, None)
    }

    fn value_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.eval(u, Some(grad))
    }

    fn lipschitz(&self, power: &PowerConfig) -> f64 {
        let norm_sq = self.norm_sq.unwrap_or_else(|| power_iteration(self.op, power));
        self.v.iter().cloned().fold(0.0, f64::max) * norm_sq
    }
}

/// Counts and flat statistics shared by the joint model.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedStats {
    /// `F 1 + Y 1 + alpha - 1`.
    pub c: Vec<f64>,
    pub v_f_hat: Vec<f64>,
    pub y: Vec<f64>,
    pub s: usize,
    pub detectors: usize,
}

impl PrecomputedStats {
    pub fn new(counts: &Sinogram, flats: &Sinogram, alpha: &[f64]) -> Result<Self> {
        check_counts(counts)?;
        let v_f_hat = ml_flatfield(flats)?;
        let r = counts.rows();
        check_len("flat-field samples", flats.rows(), r)?;
        check_len("alpha", alpha.len(), r)?;
        let s = flats.cols();
        let y_sums = counts.row_sums();
        let c = (0..r)
            .map(|i| s as f64 * v_f_hat[i] + y_sums[i] + alpha[i] - 1.0)
            .collect();
        Ok(Self {
            c,
            v_f_hat,
            y: counts.values().to_vec(),
            s,
            detectors: r,
        })
    }

    /// Detectors whose `c_i` is not strictly positive.
    pub fn degenerate_detectors(&self) -> Vec<usize> {
        (0..self.detectors).filter(|&i| !(self.c[i] > 0.0)).collect()
    }
}

/// Flat-field implied by the joint model at an image, decomposed as a convex
/// combination of three estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFieldEstimate {
    pub v: Vec<f64>,
    /// Weight of the flat-field ML estimate, `s / d`.
    pub theta_flat: Vec<f64>,
    /// Weight of the object-based ML estimate, `tau / d`.
    pub theta_object: Vec<f64>,
    /// Weight of the prior mode, `beta / d`.
    pub theta_prior: Vec<f64>,
    pub v_object: Vec<f64>,
    /// `(alpha - 1) / beta`, or 0 where `beta = 0`.
    pub v_prior: Vec<f64>,
}

/// Joint MAP objective with the flat-field eliminated in closed form:
/// `y^T A u + c^T log d(u)`, with `d(u) = s + sum_j exp(-A_j u) + beta`.
pub struct JmapObjective<'a> {
    op: &'a dyn LinearOperator,
    stats: PrecomputedStats,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

struct JmapPass {
    a: Vec<f64>,
    tau: Vec<f64>,
    d: Vec<f64>,
}

impl<'a> JmapObjective<'a> {
    pub fn new(op: &'a dyn LinearOperator, stats: PrecomputedStats, hp: &HyperParams) -> Result<Self> {
        if stats.y.len() != op.rows() {
            return mismatch(format!("counts have {} entries, operator has {} rows", stats.y.len(), op.rows()));
        }
        check_len("alpha", hp.alpha.len(), stats.detectors)?;
        check_len("beta", hp.beta.len(), stats.detectors)?;
        let bad = stats.degenerate_detectors();
        if !bad.is_empty() {
            return Err(Error::ModelDegenerate {
                detectors: bad,
                reason: "c_i = F1 + Y1 + alpha - 1 must be positive".into(),
            });
        }
        Ok(Self {
            op,
            stats,
            alpha: hp.alpha.clone(),
            beta: hp.beta.clone(),
        })
    }

    pub fn stats(&self) -> &PrecomputedStats {
        &self.stats
    }

    fn pass(&self, u: &[f64]) -> Result<JmapPass> {
        check_len("image", u.len(), self.op.cols())?;
        let r = self.stats.detectors;
        let a = self.op.apply_vec(u);
        let mut tau = vec![0.0; r];
        for (k, &ak) in a.iter().enumerate() {
            tau[k % r] += exp_neg(ak);
        }
        let d = (0..r).map(|i| self.stats.s as f64 + tau[i] + self.beta[i]).collect();
        Ok(JmapPass { a, tau, d })
    }

    fn value_of(&self, pass: &JmapPass) -> f64 {
        let lin: f64 = pass.a.iter().zip(&self.stats.y).map(|(a, y)| a * y).sum();
        let logs: f64 = self.stats.c.iter().zip(&pass.d).map(|(c, d)| c * d.ln()).sum();
        lin + logs
    }

    /// `d(u)`; exposed for inspection and tests.
    pub fn d_vector(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pass(u)?.d)
    }

    pub fn flatfield_estimate(&self, u: &[f64]) -> Result<FlatFieldEstimate> {
        let pass = self.pass(u)?;
        let r = self.stats.detectors;
        let y_sums = row_sums(&self.stats.y, r);
        let s = self.stats.s as f64;
        let mut est = FlatFieldEstimate {
            v: Vec::with_capacity(r),
            theta_flat: Vec::with_capacity(r),
            theta_object: Vec::with_capacity(r),
            theta_prior: Vec::with_capacity(r),
            v_object: Vec::with_capacity(r),
            v_prior: Vec::with_capacity(r),
        };
        for i in 0..r {
            let d = pass.d[i];
            est.v.push(self.stats.c[i] / d);
            est.theta_flat.push(s / d);
            est.theta_object.push(pass.tau[i] / d);
            est.theta_prior.push(self.beta[i] / d);
            est.v_object.push(y_sums[i] / pass.tau[i]);
            est.v_prior.push(if self.beta[i] > 0.0 {
                (self.alpha[i] - 1.0) / self.beta[i]
            } else {
                0.0
            });
        }
        Ok(est)
    }

    /// Joint negative log-posterior in `(u, v)` up to a constant:
    /// `sum_i (v_i d_i(u) - c_i log v_i) + y^T A u`. Minimizing over `v`
    /// gives `v = c / d(u)` and recovers the eliminated objective plus
    /// `sum_i c_i (1 - log c_i)`.
    pub fn joint_value(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_len("flat-field", v.len(), self.stats.detectors)?;
        if v.iter().any(|x| !(*x > 0.0)) {
            return invalid("flat-field must be positive");
        }
        let pass = self.pass(u)?;
        let lin: f64 = pass.a.iter().zip(&self.stats.y).map(|(a, y)| a * y).sum();
        let per_detector: f64 = (0..v.len())
            .map(|i| v[i] * pass.d[i] - self.stats.c[i] * v[i].ln())
            .sum();
        Ok(lin + per_detector)
    }

    /// Product of the Hessian at `u` with `x`.
    pub fn hessian_vecprod(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len("direction", x.len(), self.op.cols())?;
        let pass = self.pass(u)?;
        let r = self.stats.detectors;
        let ax = self.op.apply_vec(x);
        let mut yhat = vec![0.0; ax.len()];
        let mut dot = vec![0.0; r];
        for k in 0..ax.len() {
            let i = k % r;
            yhat[k] = self.stats.c[i] / pass.d[i] * exp_neg(pass.a[k]);
            dot[i] += yhat[k] * ax[k];
        }
        let w: Vec<f64> = (0..ax.len())
            .map(|k| {
                let i = k % r;
                yhat[k] * ax[k] - yhat[k] * dot[i] / self.stats.c[i]
            })
            .collect();
        Ok(self.op.apply_adjoint_vec(&w))
    }
}

fn row_sums(values: &[f64], r: usize) -> Vec<f64> {
    let mut sums = vec![0.0; r];
    for (k, v) in values.iter().enumerate() {
        sums[k % r] += v;
    }
    sums
}

impl SmoothObjective for JmapObjective<'_> {
    fn dim(&self) -> usize {
        self.op.cols()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        Ok(self.value_of(&self.pass(u)?))
    }

    fn value_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        let pass = self.pass(u)?;
        let value = self.value_of(&pass);
        let r = self.stats.detectors;
        let v_hat: Vec<f64> = (0..r).map(|i| self.stats.c[i] / pass.d[i]).collect();
        let resid: Vec<f64> = pass
            .a
            .iter()
            .enumerate()
            .map(|(k, &ak)| self.stats.y[k] - v_hat[k % r] * exp_neg(ak))
            .collect();
        self.op.apply_adjoint(&resid, grad);
        Ok(value)
    }

    /// `||A^T diag(y) A||`. This bounds the Hessian where the model fits
    /// the data, not uniformly over the orthant.
    fn lipschitz(&self, power: &PowerConfig) -> f64 {
        weighted_normal_norm(self.op, &self.stats.y, power)
    }

    fn flatfield(&self, u: &[f64]) -> Result<Option<FlatFieldEstimate>> {
        self.flatfield_estimate(u).map(Some)
    }
}

fn weighted_normal_norm(op: &dyn LinearOperator, w: &[f64], power: &PowerConfig) -> f64 {
    if w.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut tmp = vec![0.0; op.rows()];
    power_iteration_sym(
        op.cols(),
        |x, out| {
            op.apply(x, &mut tmp);
            for (t, wk) in tmp.iter_mut().zip(w) {
                *t *= wk;
            }
            op.apply_adjoint(&tmp, out);
        },
        power,
    )
}

/// `b_ij = log(v_f,i) - log(y_ij)`; refuses non-positive counts.
pub fn quad_b_vector(counts: &Sinogram, v_f: &[f64]) -> Result<Vec<f64>> {
    check_counts(counts)?;
    let r = counts.rows();
    check_len("flat-field", v_f.len(), r)?;
    let bad_v: Vec<usize> = (0..r).filter(|&i| !(v_f[i] > 0.0)).collect();
    if !bad_v.is_empty() {
        return Err(Error::ModelDegenerate {
            detectors: bad_v,
            reason: "flat-field estimate must be positive".into(),
        });
    }
    require_positive_counts(counts)?;
    Ok(counts
        .values()
        .iter()
        .enumerate()
        .map(|(k, &y)| v_f[k % r].ln() - y.ln())
        .collect())
}

fn require_positive_counts(counts: &Sinogram) -> Result<()> {
    let r = counts.rows();
    let bad: Vec<(usize, usize)> = counts
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &y)| !(y > 0.0))
        .map(|(k, _)| (k % r, k / r))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::PositivityViolation {
            what: "counts".into(),
            count: bad.len(),
            cells: bad.into_iter().take(8).collect(),
        })
    }
}

/// Weighted least squares `1/2 ||Au - b||^2` with weights `diag(y)`.
pub struct WlsObjective<'a> {
    op: &'a dyn LinearOperator,
    b: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> WlsObjective<'a> {
    pub fn new(op: &'a dyn LinearOperator, counts: &Sinogram, b: Vec<f64>) -> Result<Self> {
        check_counts(counts)?;
        check_operator(op, counts)?;
        check_len("b", b.len(), op.rows())?;
        require_positive_counts(counts)?;
        Ok(Self {
            op,
            b,
            y: counts.values().to_vec(),
        })
    }

    fn eval(&self, u: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        check_len("image", u.len(), self.op.cols())?;
        let mut x = self.op.apply_vec(u);
        let mut total = 0.0;
        for k in 0..x.len() {
            let e = x[k] - self.b[k];
            total += 0.5 * self.y[k] * e * e;
            x[k] = self.y[k] * e;
        }
        if let Some(g) = grad {
            self.op.apply_adjoint(&x, g);
        }
        Ok(total)
    }
}

impl SmoothObjective for WlsObjective<'_> {
    fn dim(&self) -> usize {
        self.op.cols()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        self.eval(u, None)
    }

    fn value_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.eval(u, Some(grad))
    }

    fn lipschitz(&self, power: &PowerConfig) -> f64 {
        weighted_normal_norm(self.op, &self.y, power)
    }
}

/// Applies `S = diag(y) - y y^T / kappa` to `x` for one detector row.
pub fn swls_block_apply(y_row: &[f64], kappa: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_len("block input", x.len(), y_row.len())?;
    if !(kappa > 0.0) {
        return Err(Error::ModelDegenerate {
            detectors: vec![],
            reason: format!("block denominator must be positive, got {kappa}"),
        });
    }
    let dot: f64 = y_row.iter().zip(x).map(|(a, b)| a * b).sum();
    Ok(y_row.iter().zip(x).map(|(y, xv)| y * xv - y * dot / kappa).collect())
}

/// Least squares with per-detector block weights
/// `S_i = diag(y_i) - y_i y_i^T / kappa_i`, which models a flat-field error
/// shared by all rays of a detector (stripes).
pub struct StripeWlsObjective<'a> {
    op: &'a dyn LinearOperator,
    b: Vec<f64>,
    y: Vec<f64>,
    kappa: Vec<f64>,
}

impl<'a> StripeWlsObjective<'a> {
    /// Stripe weights derived from the flat-field prior:
    /// `kappa_i = s v_f,i + sum_j y_ij + alpha_i - 1`.
    pub fn swls(op: &'a dyn LinearOperator, counts: &Sinogram, b: Vec<f64>, v_f: &[f64], alpha: &[f64], s: usize) -> Result<Self> {
        check_counts(counts)?;
        let r = counts.rows();
        check_len("flat-field", v_f.len(), r)?;
        check_len("alpha", alpha.len(), r)?;
        let prior: Vec<f64> = (0..r).map(|i| s as f64 * v_f[i] + alpha[i] - 1.0).collect();
        let bad: Vec<usize> = (0..r).filter(|&i| !(prior[i] > 0.0)).collect();
        if !bad.is_empty() {
            return Err(Error::ModelDegenerate {
                detectors: bad,
                reason: "s v_f + alpha - 1 must be positive".into(),
            });
        }
        Self::wlsz(op, counts, b, &prior)
    }

    /// Stripe weights with an explicit per-detector `lambda_i`:
    /// `kappa_i = sum_j y_ij + lambda_i`. Infinite `lambda` gives plain WLS.
    pub fn wlsz(op: &'a dyn LinearOperator, counts: &Sinogram, b: Vec<f64>, lambda: &[f64]) -> Result<Self> {
        check_counts(counts)?;
        check_operator(op, counts)?;
        check_len("b", b.len(), op.rows())?;
        let r = counts.rows();
        check_len("lambda", lambda.len(), r)?;
        if let Some(l) = lambda.iter().find(|l| !(**l > 0.0)) {
            return invalid(format!("lambda must be positive, got {l}"));
        }
        require_positive_counts(counts)?;
        let sums = counts.row_sums();
        let kappa = (0..r).map(|i| sums[i] + lambda[i]).collect();
        Ok(Self {
            op,
            b,
            y: counts.values().to_vec(),
            kappa,
        })
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Applies the block-diagonal weight to a sinogram-shaped vector.
    pub fn apply_weight(&self, x: &[f64]) -> Vec<f64> {
        let r = self.kappa.len();
        let mut dot = vec![0.0; r];
        for (k, (y, xv)) in self.y.iter().zip(x).enumerate() {
            dot[k % r] += y * xv;
        }
        (0..x.len())
            .map(|k| {
                let i = k % r;
                self.y[k] * x[k] - self.y[k] * dot[i] / self.kappa[i]
            })
            .collect()
    }

    fn eval(&self, u: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        check_len("image", u.len(), self.op.cols())?;
        let mut e = self.op.apply_vec(u);
        for (ek, bk) in e.iter_mut().zip(&self.b) {
            *ek -= bk;
        }
        let w = self.apply_weight(&e);
        let total = 0.5 * e.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        if let Some(g) = grad {
            self.op.apply_adjoint(&w, g);
        }
        Ok(total)
    }
}

impl SmoothObjective for StripeWlsObjective<'_> {
    fn dim(&self) -> usize {
        self.op.cols()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        self.eval(u, None)
    }

    fn value_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.eval(u, Some(grad))
    }

    fn lipschitz(&self, power: &PowerConfig) -> f64 {
        let mut tmp = vec![0.0; self.op.rows()];
        power_iteration_sym(
            self.op.cols(),
            |x, out| {
                self.op.apply(x, &mut tmp);
                let w = self.apply_weight(&tmp);
                self.op.apply_adjoint(&w, out);
            },
            power,
        )
    }
}
