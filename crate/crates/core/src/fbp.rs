//! Filtered backprojection with an apodized ramp filter, and the analytic
//! ring profile produced by a single-detector stripe.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::geometry::{Geometry, Image, Sinogram, SinogramKind};

/// Ramp filter `|zeta| exp(-2 pi epsilon |zeta|)`; `epsilon` is in detector
/// coordinate units (the same units as the detector width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub epsilon: f64,
    /// Rows are zero-padded to `zero_pad_factor * next_power_of_two(r)`.
    pub zero_pad_factor: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            zero_pad_factor: 4,
        }
    }
}

impl FilterConfig {
    pub fn new(epsilon: f64, zero_pad_factor: usize) -> Result<Self> {
        let cfg = Self { epsilon, zero_pad_factor };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return invalid(format!("filter epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.zero_pad_factor < 2 {
            return invalid(format!("zero-pad factor must be at least 2, got {}", self.zero_pad_factor));
        }
        Ok(())
    }
}

/// Sinogram after ramp filtering, ready to be backprojected at arbitrary
/// points.
#[derive(Debug, Clone)]
pub struct FilteredSinogram {
    geom: Geometry,
    /// Column-major like [`Sinogram`]: value for detector `i`, angle `j` at
    /// `j * r + i`.
    values: Vec<f64>,
    trig: Vec<(f64, f64)>,
}

pub fn filter_sinogram(geom: &Geometry, sino: &Sinogram, cfg: &FilterConfig) -> Result<FilteredSinogram> {
    cfg.validate()?;
    if sino.kind() == SinogramKind::Counts {
        return invalid("FBP expects line integrals or log-ratio data, not counts");
    }
    if sino.rows() != geom.detectors() || sino.cols() != geom.projections() {
        return mismatch(format!(
            "sinogram is {}x{}, geometry expects {}x{}",
            sino.rows(),
            sino.cols(),
            geom.detectors(),
            geom.projections()
        ));
    }
    let r = geom.detectors();
    let len = cfg.zero_pad_factor * r.next_power_of_two();
    let dt = geom.detector_spacing();
    let response: Vec<f64> = (0..len)
        .map(|k| {
            let signed = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
            let zeta = (signed / (len as f64 * dt)).abs();
            zeta * (-2.0 * PI * cfg.epsilon * zeta).exp()
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(len);
    let inverse = planner.plan_fft_inverse(len);
    let mut values = vec![0.0; sino.values().len()];
    values
        .par_chunks_mut(r)
        .zip(sino.values().par_chunks(r))
        .for_each(|(out, row)| {
            let mut buf: Vec<Complex64> = row.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            buf.resize(len, Complex64::new(0.0, 0.0));
            forward.process(&mut buf);
            for (b, h) in buf.iter_mut().zip(&response) {
                *b *= h;
            }
            inverse.process(&mut buf);
            // unnormalized inverse: the 1/len factor together with the
            // frequency spacing 1/(len dt) and the sample spacing dt
            for (o, b) in out.iter_mut().zip(&buf) {
                *o = b.re / len as f64;
            }
        });
    let trig = geom.angles().iter().map(|a| (a.cos(), a.sin())).collect();
    Ok(FilteredSinogram {
        geom: geom.clone(),
        values,
        trig,
    })
}

impl FilteredSinogram {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Backprojection at the point `(x, y)`.
    pub fn backproject_point(&self, x: f64, y: f64) -> f64 {
        let r = self.geom.detectors();
        let dt = self.geom.detector_spacing();
        let t_first = self.geom.detector_offset(0);
        let mut acc = 0.0;
        for (j, &(c, s)) in self.trig.iter().enumerate() {
            let f = (x * c + y * s - t_first) / dt;
            if f < 0.0 || f > (r - 1) as f64 {
                continue;
            }
            let i = (f.floor() as usize).min(r.saturating_sub(2));
            let w = f - i as f64;
            let row = &self.values[j * r..(j + 1) * r];
            acc += if r == 1 { row[0] } else { (1.0 - w) * row[i] + w * row[i + 1] };
        }
        acc * PI / self.geom.projections() as f64
    }

    /// Backprojection onto the geometry's reconstruction grid.
    pub fn backproject(&self) -> Image {
        let n = self.geom.grid_n();
        let side = self.geom.domain_side();
        let template = Image::zeros(n, side);
        let values: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|k| {
                let (x, y) = template.center(k / n, k % n);
                self.backproject_point(x, y)
            })
            .collect();
        Image::from_values(n, side, values).expect("grid size matches")
    }
}

pub fn fbp(geom: &Geometry, sino: &Sinogram, cfg: &FilterConfig) -> Result<Image> {
    Ok(filter_sinogram(geom, sino, cfg)?.backproject())
}

/// FBP of the relative flat-field error `(v_hat - v) / v`, repeated over all
/// angles. Errors in the flat-field show up as rings in this image.
pub fn stripe_image(geom: &Geometry, v: &[f64], v_hat: &[f64], cfg: &FilterConfig) -> Result<Image> {
    let r = geom.detectors();
    if v.len() != r || v_hat.len() != r {
        return mismatch(format!("flat-fields must have {r} entries, got {} and {}", v.len(), v_hat.len()));
    }
    if let Some(i) = (0..r).find(|&i| !(v[i] > 0.0)) {
        return invalid(format!("reference flat-field must be positive (detector {i})"));
    }
    let rel: Vec<f64> = (0..r).map(|i| (v_hat[i] - v[i]) / v[i]).collect();
    let p = geom.projections();
    let values: Vec<f64> = (0..p).flat_map(|_| rel.iter().copied()).collect();
    let sino = Sinogram::from_values(r, p, SinogramKind::LogRatio, values)?;
    fbp(geom, &sino, cfg)
}

/// Ring centered at the origin produced by a unit stripe at detector
/// coordinate `t0` under the apodized filter with parameter `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingProfile {
    pub t0: f64,
    pub epsilon: f64,
}

impl RingProfile {
    pub fn new(t0: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return invalid(format!("epsilon must be positive, got {epsilon}"));
        }
        if !t0.is_finite() {
            return invalid("t0 must be finite");
        }
        Ok(Self { t0, epsilon })
    }

    fn sigma(&self) -> Complex64 {
        Complex64::new(self.epsilon, self.t0)
    }

    /// `(1/2pi) Re(sigma (sigma^2 + rho^2)^(-3/2))`.
    pub fn value(&self, rho: f64) -> f64 {
        let s = self.sigma();
        let w = s * s + rho * rho;
        (s * w.powf(-1.5)).re / (2.0 * PI)
    }

    pub fn derivative(&self, rho: f64) -> f64 {
        let s = self.sigma();
        let w = s * s + rho * rho;
        -3.0 * rho * (s * w.powf(-2.5)).re / (2.0 * PI)
    }

    /// Critical points `rho >= 0` (including `rho = 0`) with their profile
    /// values, sorted by `rho`.
    pub fn extrema(&self) -> Result<Vec<Extremum>> {
        if self.t0 == 0.0 {
            return Err(Error::DegenerateInput("ring profile extrema need t0 != 0".into()));
        }
        let (eps, t0) = (self.epsilon, self.t0);
        let arg = self.sigma().arg();
        let modulus = self.sigma().norm();
        let (lo, hi) = if t0 > 0.0 { (0.0, PI) } else { (-PI, 0.0) };
        let mut out = vec![Extremum { rho: 0.0, value: self.value(0.0) }];
        for k in -5..=10 {
            let psi = 0.4 * arg + (2 * k - 1) as f64 * PI / 5.0;
            if !(psi > lo && psi < hi) {
                continue;
            }
            let c = 1.0 / psi.tan();
            let rho_sq = 2.0 * eps * t0 * c + t0 * t0 - eps * eps;
            if rho_sq <= 0.0 {
                continue;
            }
            let value = modulus * (arg - 1.5 * psi).cos()
                / (2.0 * PI * (1.0 + c * c).powf(0.75) * (2.0 * eps * t0.abs()).powf(1.5));
            out.push(Extremum { rho: rho_sq.sqrt(), value });
        }
        out.sort_by(|a, b| a.rho.total_cmp(&b.rho));
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremum {
    pub rho: f64,
    pub value: f64,
}

/// Largest and smallest extremum of the ring profile for each `t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopePoint {
    pub t0: f64,
    pub max: f64,
    pub min: f64,
}

pub fn envelope(epsilon: f64, t0_grid: &[f64]) -> Result<Vec<EnvelopePoint>> {
    t0_grid
        .iter()
        .map(|&t0| {
            let ext = RingProfile::new(t0, epsilon)?.extrema()?;
            let max = ext.iter().map(|e| e.value).fold(f64::NEG_INFINITY, f64::max);
            let min = ext.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
            Ok(EnvelopePoint { t0, max, min })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AngleSpan;

    #[test]
    fn profile_at_origin() {
        let p = RingProfile::new(0.5, 0.05).unwrap();
        let s = Complex64::new(0.05, 0.5);
        let expected = (1.0 / (s * s)).re / (2.0 * PI);
        assert!((p.value(0.0) - expected).abs() < 1e-12);
        assert!((p.value(0.0) + 0.6178).abs() < 1e-4);
    }

    #[test]
    fn profile_is_even() {
        let p = RingProfile::new(-0.7, 0.03).unwrap();
        for &rho in &[0.1, 0.5, 0.69, 0.71, 2.0] {
            assert_eq!(p.value(rho), p.value(-rho));
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let p = RingProfile::new(0.5, 0.05).unwrap();
        for &rho in &[0.05, 0.3, 0.45, 0.5, 0.52, 0.8] {
            let h = 1e-6;
            let fd = (p.value(rho + h) - p.value(rho - h)) / (2.0 * h);
            assert!((fd - p.derivative(rho)).abs() < 1e-5 * p.derivative(rho).abs().max(1.0));
        }
    }

    #[test]
    fn extrema_are_critical_points() {
        for &(t0, eps) in &[(0.5, 0.05), (-0.5, 0.05), (1.0, 0.01), (4.0, 0.01), (0.3, 0.1), (-2.0, 0.02)] {
            let p = RingProfile::new(t0, eps).unwrap();
            let ext = p.extrema().unwrap();
            assert!(ext.len() >= 2, "t0={t0}: {ext:?}");
            for e in &ext {
                let h = eps * 1e-3;
                let fd = (-p.value(e.rho + 2.0 * h) + 8.0 * p.value(e.rho + h) - 8.0 * p.value(e.rho - h)
                    + p.value(e.rho - 2.0 * h))
                    / (12.0 * h);
                let scale = p.value(e.rho).abs().max(1.0);
                assert!(p.derivative(e.rho).abs() <= 1e-8 * scale, "analytic {}", p.derivative(e.rho));
                assert!(fd.abs() <= 1e-6 * scale / eps, "t0={t0} rho={}: {fd}", e.rho);
                let direct = p.value(e.rho);
                assert!((e.value - direct).abs() <= 1e-10 * direct.abs(), "{} vs {direct}", e.value);
            }
        }
    }

    #[test]
    fn extrema_need_nonzero_t0() {
        assert!(RingProfile::new(0.0, 0.1).unwrap().extrema().is_err());
        assert!(RingProfile::new(1.0, 0.0).is_err());
    }

    #[test]
    fn extremum_scaling_law() {
        let peak = |t0: f64| {
            RingProfile::new(t0, 0.01)
                .unwrap()
                .extrema()
                .unwrap()
                .iter()
                .map(|e| e.value.abs())
                .fold(0.0, f64::max)
        };
        let ratio = peak(1.0) / peak(4.0);
        assert!((ratio - 2.0).abs() <= 0.2, "{ratio}");
    }

    #[test]
    fn envelope_shape() {
        let grid: Vec<f64> = (1..=20).map(|k| 0.1 * k as f64).collect();
        let env = envelope(0.05, &grid).unwrap();
        for w in env.windows(2) {
            assert!(w[1].max <= w[0].max && w[1].min >= w[0].min);
        }
        let neg: Vec<f64> = grid.iter().map(|t| -t).collect();
        let env_neg = envelope(0.05, &neg).unwrap();
        for (a, b) in env.iter().zip(&env_neg) {
            assert!((a.max - b.max).abs() <= 1e-12 * a.max.abs());
            assert!((a.min - b.min).abs() <= 1e-12 * a.min.abs());
        }
    }

    #[test]
    fn fbp_zero_and_linear() {
        let g = Geometry::parallel(24, 18, 2.0, 2.0, 16, AngleSpan::Half).unwrap();
        let cfg = FilterConfig::new(0.02, 2).unwrap();
        let zero = Sinogram::zeros(24, 18, SinogramKind::LineIntegrals);
        assert!(fbp(&g, &zero, &cfg).unwrap().values().iter().all(|&v| v == 0.0));

        let s1: Vec<f64> = (0..24 * 18).map(|k| ((k * 7919) % 101) as f64 / 101.0).collect();
        let s2: Vec<f64> = (0..24 * 18).map(|k| ((k * 104729) % 37) as f64 / 37.0).collect();
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 2.5 * a - 0.75 * b).collect();
        let f = |v: Vec<f64>| {
            fbp(&g, &Sinogram::from_values(24, 18, SinogramKind::LineIntegrals, v).unwrap(), &cfg)
                .unwrap()
                .into_values()
        };
        let (a, b, m) = (f(s1), f(s2), f(mix));
        for k in 0..a.len() {
            assert!((m[k] - (2.5 * a[k] - 0.75 * b[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn filtering_is_shift_equivariant() {
        let g = Geometry::parallel(32, 1, 2.0, 2.0, 8, AngleSpan::Half).unwrap();
        let cfg = FilterConfig::new(0.05, 4).unwrap();
        let mut a = vec![0.0; 32];
        let mut b = vec![0.0; 32];
        a[10] = 1.0;
        a[11] = 0.5;
        b[13] = 1.0;
        b[14] = 0.5;
        let fa = filter_sinogram(&g, &Sinogram::from_values(32, 1, SinogramKind::LogRatio, a).unwrap(), &cfg).unwrap();
        let fb = filter_sinogram(&g, &Sinogram::from_values(32, 1, SinogramKind::LogRatio, b).unwrap(), &cfg).unwrap();
        for i in 0..29 {
            assert!((fa.values()[i] - fb.values()[i + 3]).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_are_rejected() {
        let g = Geometry::parallel(4, 2, 2.0, 2.0, 4, AngleSpan::Half).unwrap();
        let s = Sinogram::zeros(4, 2, SinogramKind::Counts);
        assert!(fbp(&g, &s, &FilterConfig::default()).is_err());
    }
}
