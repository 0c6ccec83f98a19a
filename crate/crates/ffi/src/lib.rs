//! C ABI for the `jointct` toolkit.
//!
//! Every function returns a [`JctStatus`]; on failure a message describing
//! the error is kept per thread and can be read with
//! [`jct_last_error_message`]. Objects are opaque handles created by a
//! `*_new` function and released with the matching `*_free`.
//!
//! Array conventions match the Rust library: sinograms are stored with the
//! detector index fastest (`values[j * detectors + i]` for detector `i` and
//! projection `j`), flat samples as `values[k * detectors + i]` for sample
//! `k`, and images row-major from the top row.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use jointct::config::ExperimentConfig;
use jointct::experiment;
use jointct::geometry::{AngleSpan, Geometry, Image, LinearOperator, Projector, Sinogram, SinogramKind};
use jointct::objectives::{
    ml_flatfield, quad_b_vector, HyperParams, JmapObjective, PoissonObjective, PrecomputedStats, SmoothObjective,
    StripeWlsObjective, WlsObjective,
};
use jointct::priors::TvConfig;
use jointct::solver::{prox_gradient, Problem, SolverConfig};
use jointct::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JctStatus {
    Ok = 0,
    InvalidArgument = 1,
    DimensionMismatch = 2,
    ModelDegenerate = 3,
    PositivityViolation = 4,
    NonFinite = 5,
    NullPointer = 6,
    Io = 7,
    Panic = 8,
}

/// Reconstruction models available through [`jct_reconstruct`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JctModel {
    /// Poisson likelihood with the flat-field ML estimate plugged in.
    Amap = 0,
    /// Joint image and flat-field estimate.
    Jmap = 1,
    /// Weighted least squares on log data.
    Wls = 2,
    /// Least squares with stripe-correlated weights.
    Swls = 3,
}

/// Parallel-beam system operator.
pub struct JctProjector {
    inner: Projector,
}

/// Output of a reconstruction.
pub struct JctReconstruction {
    image: Vec<f64>,
    flatfield: Vec<f64>,
    objective: Vec<f64>,
    lipschitz: f64,
}

/// Solver options for [`jct_reconstruct`]; initialize with
/// [`jct_solve_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct JctSolveOptions {
    pub iterations: usize,
    /// Step is `step_factor / L`, in (0, 2).
    pub step_factor: f64,
    /// Flat-field prior weight; the prior shape is `1 + beta * v_f`.
    pub beta: f64,
    /// TV weight; 0 disables TV.
    pub gamma: f64,
    /// Huber smoothing of TV, cm^-1.
    pub delta: f64,
    /// Objective values are recorded every this many iterations.
    pub record_every: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> JctStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::DegenerateInput(_) => JctStatus::InvalidArgument,
        Error::DimensionMismatch(_) => JctStatus::DimensionMismatch,
        Error::ModelDegenerate { .. } => JctStatus::ModelDegenerate,
        Error::PositivityViolation { .. } => JctStatus::PositivityViolation,
        Error::NonFinite { .. } | Error::DescentViolation { .. } => JctStatus::NonFinite,
        Error::Io(_) | Error::Format(_) => JctStatus::Io,
    }
}

struct Fail(JctStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(JctStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> JctStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            JctStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            JctStatus::Panic
        }
    }
}

unsafe fn input<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got == want {
        Ok(())
    } else {
        Err(Fail(JctStatus::DimensionMismatch, format!("{what} has length {got}, expected {want}")))
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Fail(JctStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn jct_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code (a `JctStatus` value).
#[no_mangle]
pub extern "C" fn jct_status_name(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"invalid argument",
        2 => c"dimension mismatch",
        3 => c"model degenerate",
        4 => c"positivity violation",
        5 => c"non-finite value",
        6 => c"null pointer",
        7 => c"i/o error",
        8 => c"internal panic",
        _ => c"unknown status",
    };
    s.as_ptr()
}

/// Library version, e.g. "0.1.0".
#[no_mangle]
pub extern "C" fn jct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a projector for an equispaced parallel-beam scan over half a
/// rotation (`full_rotation = 0`) or a full rotation. Lengths in cm. With
/// `cache_weights` the system matrix is stored once, trading memory for
/// speed.
#[no_mangle]
pub unsafe extern "C" fn jct_projector_new(
    detectors: usize,
    projections: usize,
    detector_width: f64,
    domain_side: f64,
    grid_n: usize,
    full_rotation: bool,
    cache_weights: bool,
    out: *mut *mut JctProjector,
) -> JctStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let span = if full_rotation { AngleSpan::Full } else { AngleSpan::Half };
        let geom = Geometry::parallel(detectors, projections, detector_width, domain_side, grid_n, span)?;
        let inner = if cache_weights { Projector::cached(geom) } else { Projector::new(geom) };
        *out = Box::into_raw(Box::new(JctProjector { inner }));
        Ok(())
    })
}

/// Releases a projector; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn jct_projector_free(projector: *mut JctProjector) {
    if !projector.is_null() {
        drop(Box::from_raw(projector));
    }
}

/// Number of rays (`detectors * projections`) and pixels (`grid_n^2`).
#[no_mangle]
pub unsafe extern "C" fn jct_projector_dims(
    projector: *const JctProjector,
    rays: *mut usize,
    pixels: *mut usize,
) -> JctStatus {
    guard(|| {
        let p = projector.as_ref().ok_or_else(|| null("projector"))?;
        if rays.is_null() || pixels.is_null() {
            return Err(null("output"));
        }
        *rays = p.inner.rows();
        *pixels = p.inner.cols();
        Ok(())
    })
}

/// Line integrals `A u`: `image` has `pixels` values, `sinogram` receives
/// `rays` values.
#[no_mangle]
pub unsafe extern "C" fn jct_projector_forward(
    projector: *const JctProjector,
    image: *const f64,
    image_len: usize,
    sinogram: *mut f64,
    sinogram_len: usize,
) -> JctStatus {
    guard(|| {
        let p = projector.as_ref().ok_or_else(|| null("projector"))?;
        let x = input(image, image_len, "image")?;
        let y = output(sinogram, sinogram_len, "sinogram")?;
        expect_len(x.len(), p.inner.cols(), "image")?;
        expect_len(y.len(), p.inner.rows(), "sinogram")?;
        p.inner.apply(x, y);
        Ok(())
    })
}

/// Backprojection `A^T y`.
#[no_mangle]
pub unsafe extern "C" fn jct_projector_back(
    projector: *const JctProjector,
    sinogram: *const f64,
    sinogram_len: usize,
    image: *mut f64,
    image_len: usize,
) -> JctStatus {
    guard(|| {
        let p = projector.as_ref().ok_or_else(|| null("projector"))?;
        let y = input(sinogram, sinogram_len, "sinogram")?;
        let x = output(image, image_len, "image")?;
        expect_len(y.len(), p.inner.rows(), "sinogram")?;
        expect_len(x.len(), p.inner.cols(), "image")?;
        p.inner.apply_adjoint(y, x);
        Ok(())
    })
}

/// Flat-field ML estimate (per-detector mean of `samples` flat exposures).
#[no_mangle]
pub unsafe extern "C" fn jct_ml_flatfield(
    flats: *const f64,
    detectors: usize,
    samples: usize,
    out: *mut f64,
    out_len: usize,
) -> JctStatus {
    guard(|| {
        let f = input(flats, detectors * samples, "flats")?;
        let o = output(out, out_len, "out")?;
        expect_len(o.len(), detectors, "out")?;
        let sino = Sinogram::from_values(detectors, samples, SinogramKind::Counts, f.to_vec())?;
        o.copy_from_slice(&ml_flatfield(&sino)?);
        Ok(())
    })
}

/// Defaults: 500 iterations, step factor 1.8, beta 0, no TV, delta 0.01,
/// objective recorded every 10 iterations.
#[no_mangle]
pub extern "C" fn jct_solve_options_default() -> JctSolveOptions {
    JctSolveOptions {
        iterations: 500,
        step_factor: 1.8,
        beta: 0.0,
        gamma: 0.0,
        delta: 0.01,
        record_every: 10,
    }
}

/// Reconstructs from photon counts (`rays` values) and flat samples
/// (`detectors * samples` values) with the chosen model (a `JctModel`
/// value), starting from zero. `options` may be null for the defaults.
#[no_mangle]
pub unsafe extern "C" fn jct_reconstruct(
    projector: *const JctProjector,
    model: i32,
    counts: *const f64,
    counts_len: usize,
    flats: *const f64,
    samples: usize,
    options: *const JctSolveOptions,
    out: *mut *mut JctReconstruction,
) -> JctStatus {
    guard(|| {
        let p = projector.as_ref().ok_or_else(|| null("projector"))?;
        let model = match model {
            0 => JctModel::Amap,
            1 => JctModel::Jmap,
            2 => JctModel::Wls,
            3 => JctModel::Swls,
            m => return Err(Fail(JctStatus::InvalidArgument, format!("unknown model {m}"))),
        };
        let opts = options.as_ref().copied().unwrap_or_else(|| jct_solve_options_default());
        if out.is_null() {
            return Err(null("out"));
        }
        let geom = p.inner.geometry();
        let (r, n) = (geom.detectors(), geom.grid_n());
        let y = input(counts, counts_len, "counts")?;
        expect_len(y.len(), geom.rays(), "counts")?;
        if samples == 0 {
            return Err(Fail(JctStatus::InvalidArgument, "at least one flat sample is needed".into()));
        }
        let f = input(flats, r * samples, "flats")?;
        let counts = Sinogram::from_values(r, geom.projections(), SinogramKind::Counts, y.to_vec())?;
        let flats = Sinogram::from_values(r, samples, SinogramKind::Counts, f.to_vec())?;
        let v_f = ml_flatfield(&flats)?;
        let alpha: Vec<f64> = v_f.iter().map(|v| 1.0 + opts.beta * v).collect();

        let obj: Box<dyn SmoothObjective + '_> = match model {
            JctModel::Amap => Box::new(PoissonObjective::new(&p.inner, &counts, v_f.clone())?),
            JctModel::Jmap => {
                let hp = HyperParams::new(alpha.clone(), vec![opts.beta; r], opts.gamma, opts.delta)?;
                let stats = PrecomputedStats::new(&counts, &flats, &hp.alpha)?;
                Box::new(JmapObjective::new(&p.inner, stats, &hp)?)
            }
            JctModel::Wls => Box::new(WlsObjective::new(&p.inner, &counts, quad_b_vector(&counts, &v_f)?)?),
            JctModel::Swls => {
                let b = quad_b_vector(&counts, &v_f)?;
                Box::new(StripeWlsObjective::swls(&p.inner, &counts, b, &v_f, &alpha, samples)?)
            }
        };
        let mut problem = Problem::new(obj.as_ref(), n)?;
        if opts.gamma > 0.0 {
            problem = problem.with_tv(TvConfig::new(opts.delta, opts.gamma)?);
        }
        let cfg = SolverConfig {
            max_iters: opts.iterations,
            step_factor: opts.step_factor,
            record_every: opts.record_every.max(1),
            ..Default::default()
        };
        let res = prox_gradient(&problem, &cfg, None)?;
        let flatfield = match res.flatfield {
            Some(ff) => ff.v,
            None => v_f,
        };
        *out = Box::into_raw(Box::new(JctReconstruction {
            image: res.image,
            flatfield,
            objective: res.history.iter().map(|h| h.objective).collect(),
            lipschitz: res.lipschitz,
        }));
        Ok(())
    })
}

/// Releases a reconstruction; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn jct_reconstruction_free(rec: *mut JctReconstruction) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, dst_len: usize, what: &str) -> Result<(), Fail> {
    let o = output(dst, dst_len, what)?;
    expect_len(o.len(), src.len(), what)?;
    o.copy_from_slice(src);
    Ok(())
}

/// Copies the image (`grid_n^2` values, cm^-1).
#[no_mangle]
pub unsafe extern "C" fn jct_reconstruction_image(
    rec: *const JctReconstruction,
    out: *mut f64,
    out_len: usize,
) -> JctStatus {
    guard(|| {
        let r = rec.as_ref().ok_or_else(|| null("reconstruction"))?;
        copy_out(&r.image, out, out_len, "image")
    })
}

/// Copies the flat-field estimate (`detectors` values): the joint estimate
/// for JMAP, the ML estimate otherwise.
#[no_mangle]
pub unsafe extern "C" fn jct_reconstruction_flatfield(
    rec: *const JctReconstruction,
    out: *mut f64,
    out_len: usize,
) -> JctStatus {
    guard(|| {
        let r = rec.as_ref().ok_or_else(|| null("reconstruction"))?;
        copy_out(&r.flatfield, out, out_len, "flatfield")
    })
}

/// Number of recorded objective values.
#[no_mangle]
pub unsafe extern "C" fn jct_reconstruction_history_len(rec: *const JctReconstruction, len: *mut usize) -> JctStatus {
    guard(|| {
        let r = rec.as_ref().ok_or_else(|| null("reconstruction"))?;
        if len.is_null() {
            return Err(null("len"));
        }
        *len = r.objective.len();
        Ok(())
    })
}

/// Copies the recorded objective values.
#[no_mangle]
pub unsafe extern "C" fn jct_reconstruction_history(
    rec: *const JctReconstruction,
    out: *mut f64,
    out_len: usize,
) -> JctStatus {
    guard(|| {
        let r = rec.as_ref().ok_or_else(|| null("reconstruction"))?;
        copy_out(&r.objective, out, out_len, "history")
    })
}

/// Lipschitz constant used for the step.
#[no_mangle]
pub unsafe extern "C" fn jct_reconstruction_lipschitz(rec: *const JctReconstruction, out: *mut f64) -> JctStatus {
    guard(|| {
        let r = rec.as_ref().ok_or_else(|| null("reconstruction"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.lipschitz;
        Ok(())
    })
}

/// Filtered backprojection of a log-ratio sinogram with apodization
/// `epsilon` (0 for the plain ramp filter).
#[no_mangle]
pub unsafe extern "C" fn jct_fbp(
    projector: *const JctProjector,
    sinogram: *const f64,
    sinogram_len: usize,
    epsilon: f64,
    image: *mut f64,
    image_len: usize,
) -> JctStatus {
    guard(|| {
        let p = projector.as_ref().ok_or_else(|| null("projector"))?;
        let geom = p.inner.geometry();
        let y = input(sinogram, sinogram_len, "sinogram")?;
        expect_len(y.len(), geom.rays(), "sinogram")?;
        let o = output(image, image_len, "image")?;
        expect_len(o.len(), geom.pixels(), "image")?;
        let sino = Sinogram::from_values(geom.detectors(), geom.projections(), SinogramKind::LogRatio, y.to_vec())?;
        let cfg = jointct::fbp::FilterConfig::new(epsilon, 4)?;
        let img: Image = jointct::fbp::fbp(geom, &sino, &cfg)?;
        o.copy_from_slice(img.values());
        Ok(())
    })
}

/// Value of the ring profile produced by a unit stripe at detector offset
/// `t0` (cm) at radius `rho`, for apodization `epsilon`.
#[no_mangle]
pub unsafe extern "C" fn jct_ring_profile(t0: f64, epsilon: f64, rho: f64, out: *mut f64) -> JctStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = jointct::fbp::RingProfile::new(t0, epsilon)?.value(rho);
        Ok(())
    })
}

/// Runs every stage an experiment configuration (TOML file) asks for,
/// writing under `out_dir`. Failed reconstruction jobs are listed in the
/// output manifests; the call fails only if a stage cannot complete. An
/// unreadable or invalid configuration gives `InvalidArgument`.
#[no_mangle]
pub unsafe extern "C" fn jct_run_experiment(config_path: *const c_char, out_dir: *const c_char) -> JctStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_path(path_arg(config_path, "config_path")?)?;
        let root = path_arg(out_dir, "out_dir")?;
        experiment::run_all(&cfg, root)?;
        Ok(())
    })
}
