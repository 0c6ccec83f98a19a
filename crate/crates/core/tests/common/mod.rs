#![allow(dead_code)]

use jointct::geometry::{AngleSpan, Geometry, Image, Projector, Sinogram};
use jointct::simulate::{counts_from_line_integrals, sample_flats, stream_rng, FlatFieldTruth};
use rand::Rng;

/// Small noisy problem: projector, true image, counts and flats.
pub struct SmallProblem {
    pub projector: Projector,
    pub truth_image: Vec<f64>,
    pub truth_v: Vec<f64>,
    pub counts: Sinogram,
    pub flats: Sinogram,
}

/// Builds a problem on an `n x n` grid with `r` detectors, `p` angles and
/// `s` flats; the object is a smooth random blob so counts stay positive.
pub fn small_problem(n: usize, r: usize, p: usize, s: usize, i0: f64, seed: u64) -> SmallProblem {
    let geom = Geometry::parallel(r, p, 1.2, 1.0, n, AngleSpan::Half).unwrap();
    let projector = Projector::new(geom);
    let mut rng = stream_rng(seed, "test-problem", 0);
    let truth_image: Vec<f64> = Image::from_fn(n, 1.0, |x, y| {
        let rr = x * x + y * y;
        if rr < 0.2 { 1.5 + 0.5 * (3.0 * x).sin() } else { 0.0 }
    })
    .values()
    .iter()
    .map(|v| v * (0.8 + 0.4 * rng.random::<f64>()))
    .collect();
    let truth_v: Vec<f64> = (0..r).map(|_| i0 * (0.8 + 0.4 * rng.random::<f64>())).collect();
    let truth = FlatFieldTruth { v: truth_v.clone(), i0 };
    let li = projector.forward(&Image::from_values(n, 1.0, truth_image.clone()).unwrap()).unwrap();
    let counts = counts_from_line_integrals(&truth, &li, seed + 1).unwrap();
    let flats = sample_flats(&truth, s, seed + 2).unwrap();
    SmallProblem { projector, truth_image, truth_v, counts, flats }
}

pub fn random_vec(len: usize, lo: f64, hi: f64, seed: u64, tag: &str) -> Vec<f64> {
    let mut rng = stream_rng(seed, tag, 0);
    (0..len).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

/// Central-difference gradient check on a few coordinates; returns the
/// worst relative error, measured against the gradient norm.
pub fn fd_check(f: &dyn Fn(&[f64]) -> f64, grad: &[f64], u: &[f64], coords: &[usize]) -> f64 {
    fd_check_step(f, grad, u, coords, 1e-5)
}

/// As [`fd_check`] with relative step `h_rel`; quadratics have no truncation
/// error, so a large step only reduces roundoff.
pub fn fd_check_step(f: &dyn Fn(&[f64]) -> f64, grad: &[f64], u: &[f64], coords: &[usize], h_rel: f64) -> f64 {
    let gnorm = norm(grad).max(1e-12);
    let mut worst: f64 = 0.0;
    for &k in coords {
        let h = h_rel * (1.0 + u[k].abs());
        let mut up = u.to_vec();
        let mut um = u.to_vec();
        up[k] += h;
        um[k] -= h;
        let fd = (f(&up) - f(&um)) / (2.0 * h);
        let err = (fd - grad[k]).abs() / grad[k].abs().max(1e-3 * gnorm);
        worst = worst.max(err);
    }
    worst
}

/// Eigenvalues of a symmetric matrix (row-major) by cyclic Jacobi sweeps.
pub fn symmetric_eigenvalues(n: usize, mut a: Vec<f64>) -> Vec<f64> {
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Dense `M^T W M` for a row-major `rows x cols` matrix and row weights.
pub fn weighted_gram(m: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for i in 0..cols {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..cols {
                g[i * cols + j] += w[r] * row[i] * row[j];
            }
        }
    }
    g
}
