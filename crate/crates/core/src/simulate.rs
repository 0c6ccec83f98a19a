//! Seeded simulation of flat-fields, flat-field samples and transmission
//! counts.
//!
//! Every random cell draws from its own ChaCha8 stream keyed by
//! `(seed, purpose, cell)`, so results do not depend on evaluation order or
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{invalid, mismatch, Result};
use crate::geometry::{Geometry, Image, Projector, Sinogram, SinogramKind};

/// Poisson means below this produce 0 without sampling.
const MIN_MEAN: f64 = 1e-300;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for one `(seed, purpose, stream)` triple.
pub fn stream_rng(seed: u64, purpose: &str, stream: u64) -> ChaCha8Rng {
    // FNV-1a of the purpose tag, mixed with the seed into a 256-bit key
    let tag = purpose
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    let mut state = seed ^ tag.rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

fn cell_stream(i: usize, j: usize) -> u64 {
    ((i as u64) << 32) | j as u64
}

/// Draws one Poisson variate with the given mean.
pub fn poisson_sampler(mean: f64, rng: &mut ChaCha8Rng) -> Result<u64> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return invalid(format!("Poisson mean must be finite and nonnegative, got {mean}"));
    }
    if mean < MIN_MEAN {
        return Ok(0);
    }
    let dist = Poisson::new(mean).map_err(|e| crate::Error::InvalidArgument(format!("Poisson({mean}): {e}")))?;
    Ok(dist.sample(rng) as u64)
}

/// True flat-field `v` (photons per detector element).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFieldTruth {
    pub v: Vec<f64>,
    pub i0: f64,
}

impl FlatFieldTruth {
    /// Constant flat-field `v = omega 1`.
    pub fn constant(omega: f64, detectors: usize) -> Result<Self> {
        if !(omega > 0.0) {
            return invalid("flat-field intensity must be positive");
        }
        Ok(Self {
            v: vec![omega; detectors],
            i0: omega,
        })
    }
}

/// `v_i ~ Poisson(I0)`, redrawn until positive.
pub fn sample_flatfield_truth(i0: f64, detectors: usize, seed: u64) -> Result<FlatFieldTruth> {
    if !(i0 > 0.0) || !i0.is_finite() {
        return invalid(format!("source intensity must be positive, got {i0}"));
    }
    let v = (0..detectors)
        .map(|i| {
            let mut rng = stream_rng(seed, "flatfield-truth", i as u64);
            loop {
                let draw = poisson_sampler(i0, &mut rng)?;
                if draw > 0 {
                    return Ok(draw as f64);
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlatFieldTruth { v, i0 })
}

/// `s` independent flat-field samples per detector: an `r x s` count matrix.
pub fn sample_flats(truth: &FlatFieldTruth, s: usize, seed: u64) -> Result<Sinogram> {
    if s == 0 {
        return invalid("need at least one flat-field sample");
    }
    let r = truth.v.len();
    let mut values = vec![0.0; r * s];
    values.par_chunks_mut(r).enumerate().try_for_each(|(k, col)| {
        for (i, out) in col.iter_mut().enumerate() {
            let mut rng = stream_rng(seed, "flats", cell_stream(i, k));
            *out = poisson_sampler(truth.v[i], &mut rng)? as f64;
        }
        Ok::<_, crate::Error>(())
    })?;
    Sinogram::from_values(r, s, SinogramKind::Counts, values)
}

/// Poisson counts with means `v_i exp(-l_ij)` for given line integrals.
pub fn counts_from_line_integrals(truth: &FlatFieldTruth, line_integrals: &Sinogram, seed: u64) -> Result<Sinogram> {
    let r = line_integrals.rows();
    if truth.v.len() != r {
        return mismatch(format!("flat-field has {} entries, sinogram {} rows", truth.v.len(), r));
    }
    let mut values = vec![0.0; line_integrals.values().len()];
    values
        .par_chunks_mut(r)
        .zip(line_integrals.values().par_chunks(r))
        .enumerate()
        .try_for_each(|(j, (col, integrals))| {
            for (i, (out, &l)) in col.iter_mut().zip(integrals).enumerate() {
                let mean = truth.v[i] * (-l).exp();
                let mut rng = stream_rng(seed, "counts", cell_stream(i, j));
                *out = poisson_sampler(mean, &mut rng)? as f64;
            }
            Ok::<_, crate::Error>(())
        })?;
    Sinogram::from_values(r, line_integrals.cols(), SinogramKind::Counts, values)
}

/// Counts for an object given on the simulation grid (`forward_grid_n`), so
/// the data are not generated with the reconstruction discretization.
pub fn sample_measurements(truth: &FlatFieldTruth, geom: &Geometry, img_fine: &Image, seed: u64) -> Result<Sinogram> {
    if img_fine.n() != geom.forward_grid_n() {
        return mismatch(format!(
            "simulation image is {}x{}, geometry simulates on {}",
            img_fine.n(),
            img_fine.n(),
            geom.forward_grid_n()
        ));
    }
    let integrals = Projector::new(geom.forward_geometry()).forward(img_fine)?;
    counts_from_line_integrals(truth, &integrals, seed)
}

/// One simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub counts: Sinogram,
    pub flats: Sinogram,
    pub seed: u64,
}

impl MeasurementSet {
    pub fn flat_samples(&self) -> usize {
        self.flats.cols()
    }
}
