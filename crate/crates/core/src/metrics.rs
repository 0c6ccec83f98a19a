//! Reconstruction quality measures.

use crate::error::{invalid, mismatch, Result};
use crate::fbp::{stripe_image, FilterConfig};
use crate::geometry::Geometry;

fn masked_norm(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative attenuation error in percent, optionally restricted to a mask.
pub fn rae(estimate: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return mismatch(format!("images have {} and {} pixels", estimate.len(), truth.len()));
    }
    if let Some(m) = mask {
        if m.len() != truth.len() {
            return mismatch("mask size differs from image size");
        }
    }
    let keep = |k: usize| mask.is_none_or(|m| m[k]);
    let num = masked_norm((0..truth.len()).filter(|&k| keep(k)).map(|k| estimate[k] - truth[k]));
    let den = masked_norm((0..truth.len()).filter(|&k| keep(k)).map(|k| truth[k]));
    if den == 0.0 {
        return invalid("reference image is zero on the evaluation region");
    }
    Ok(100.0 * num / den)
}

/// Relative flat-field error in percent.
pub fn rfe(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return mismatch(format!("flat-fields have {} and {} entries", estimate.len(), truth.len()));
    }
    let den = masked_norm(truth.iter().copied());
    if den == 0.0 {
        return invalid("reference flat-field is zero");
    }
    Ok(100.0 * masked_norm(estimate.iter().zip(truth).map(|(a, b)| a - b)) / den)
}

/// Ring ratio: Frobenius norm of the stripe image of `candidate` relative to
/// that of the flat-field ML estimate. NaN when the ML estimate is exact and
/// the ratio is undefined.
pub fn ring_ratio(candidate: &[f64], v_f_hat: &[f64], v: &[f64], geom: &Geometry, cfg: &FilterConfig) -> Result<f64> {
    let num = stripe_image(geom, v, candidate, cfg)?;
    let den = stripe_image(geom, v, v_f_hat, cfg)?;
    let d = masked_norm(den.values().iter().copied());
    if d == 0.0 {
        return Ok(f64::NAN);
    }
    Ok(masked_norm(num.values().iter().copied()) / d)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Separable Gaussian blur with replicated borders.
fn blur(x: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            tmp[r * n + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * x[r * n + clamp(c as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(r as isize + k as isize - radius) * n + c])
                .sum();
        }
    }
    out
}

/// Mean structural similarity of two `n x n` images with a Gaussian window.
pub fn ssim(a: &[f64], b: &[f64], n: usize, sigma: f64, dynamic_range: f64) -> Result<f64> {
    if a.len() != n * n || b.len() != n * n {
        return mismatch(format!("images must have {} pixels", n * n));
    }
    if !(sigma > 0.0) {
        return invalid(format!("SSIM window sigma must be positive, got {sigma}"));
    }
    if !(dynamic_range > 0.0) {
        return invalid(format!("dynamic range must be positive, got {dynamic_range}"));
    }
    let kernel = gaussian_kernel(sigma);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur(a, n, &kernel);
    let mu_b = blur(b, n, &kernel);
    let aa = blur(&prod(a, a), n, &kernel);
    let bb = blur(&prod(b, b), n, &kernel);
    let ab = blur(&prod(a, b), n, &kernel);
    let total: f64 = (0..n * n)
        .map(|k| {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let va = aa[k] - ma * ma;
            let vb = bb[k] - mb * mb;
            let cov = ab[k] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / (n * n) as f64)
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rae: f64,
    pub rfe: f64,
    pub rr: f64,
    pub ssim: f64,
}
