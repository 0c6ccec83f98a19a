//! Config-driven pipelines: simulate, reconstruct, analyze and profile.
//!
//! Each stage owns one subdirectory of the output root (`data`, `recon`,
//! `analysis`, `profile`) and writes a manifest there listing every file
//! with its SHA-256. Independent `(set, model)` jobs run on the current rayon
//! pool; their results are collected in job order and written by the calling
//! thread, so outputs do not depend on the number of workers.

use std::path::Path;

use rayon::prelude::*;

use crate::config::{
    ExperimentConfig, FlatFieldMode, InitKind, ModelConfig, ModelKind, PhantomConfig, ProfileConfig, SimulationConfig,
};
use crate::error::{Error, Result};
use crate::fbp::{envelope, fbp, stripe_image, FilterConfig, RingProfile};
use crate::geometry::{Geometry, Image, LinearOperator, Projector, Sinogram, SinogramKind};
use crate::io::{
    decode_image_csv, decode_sinogram_bin, decode_sinogram_csv, encode_image_csv, encode_sinogram_bin,
    encode_sinogram_csv, fmt_metric, FailureEntry, Manifest, OutputDir, SetEntry, Table, Window, MANIFEST_NAME,
};
use crate::metrics::{rae, rfe, ring_ratio, ssim};
use crate::objectives::{
    ml_flatfield, quad_b_vector, FlatFieldEstimate, HyperParams, JmapObjective, PoissonObjective, PrecomputedStats,
    SmoothObjective, StripeWlsObjective, WlsObjective,
};
use crate::phantoms::{analytic_sinogram, grains, rasterize, shepp_logan, three_squares, EllipsePhantom, GrainsSpec};
use crate::priors::{make_hyperparams, FlatPrior, TvConfig};
use crate::simulate::{counts_from_line_integrals, sample_flats, sample_flatfield_truth, FlatFieldTruth};
use crate::solver::{
    power_iteration, prox_gradient, Init, IterationRecord, MetricCallback, PowerConfig, Problem, SolverConfig,
};

pub const DATA_DIR: &str = "data";
pub const RECON_DIR: &str = "recon";
pub const ANALYSIS_DIR: &str = "analysis";
pub const PROFILE_DIR: &str = "profile";

/// Unit recorded for attenuation images.
const ATTENUATION_UNIT: &str = "cm^-1";

fn scan_parts(cfg: &ExperimentConfig) -> Result<(Geometry, &PhantomConfig, &SimulationConfig)> {
    match (&cfg.phantom, &cfg.simulation) {
        (Some(p), Some(s)) => Ok((cfg.geometry()?, p, s)),
        _ => Err(Error::Config(
            "this command needs geometry, phantom and simulation sections".into(),
        )),
    }
}

fn base_manifest(stage: &str, cfg: &ExperimentConfig) -> Manifest {
    Manifest {
        stage: stage.into(),
        experiment: cfg.name.clone(),
        config_fingerprint: cfg.fingerprint(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: {
            let mut c = cfg.clone();
            c.output.directory.clear();
            toml::from_str(&c.to_toml()).ok()
        },
        sets: Vec::new(),
        failures: Vec::new(),
        images: Vec::new(),
        files: Vec::new(),
    }
}

fn load_stage(root: &Path, stage_dir: &str, cfg: &ExperimentConfig, hint: &str) -> Result<Manifest> {
    let dir = root.join(stage_dir);
    if !dir.join(MANIFEST_NAME).is_file() {
        return Err(Error::Format(format!(
            "no manifest in {}; run `jointct {hint}` first",
            dir.display()
        )));
    }
    let m = Manifest::load(&dir)?;
    if m.config_fingerprint != cfg.fingerprint() {
        return Err(Error::Format(format!(
            "mismatched manifests: {} was produced by configuration {:?} (fingerprint {}), current configuration {:?} has {}",
            dir.join(MANIFEST_NAME).display(),
            m.experiment,
            m.config_fingerprint,
            cfg.name,
            cfg.fingerprint()
        )));
    }
    Ok(m)
}

/// One measurement set: intensity and seed.
pub fn set_entries(sim: &SimulationConfig) -> Vec<SetEntry> {
    sim.intensities
        .iter()
        .flat_map(|&intensity| {
            sim.seeds.iter().map(move |&seed| SetEntry {
                label: format!("i{intensity}-s{seed}"),
                intensity,
                seed,
            })
        })
        .collect()
}

/// Ground truth on the simulation grid and the reconstruction grid, plus the
/// ellipse description when line integrals are computed analytically.
pub struct PhantomData {
    pub fine: Image,
    pub truth: Image,
    pub analytic: Option<EllipsePhantom>,
}

/// Mean over `f x f` blocks; `fine.n()` must be a multiple of `n`.
fn block_average(fine: &Image, n: usize) -> Image {
    let m = fine.n();
    let f = m / n;
    let mut values = vec![0.0; n * n];
    for r in 0..m {
        for c in 0..m {
            values[(r / f) * n + c / f] += fine.get(r, c);
        }
    }
    let w = 1.0 / (f * f) as f64;
    values.iter_mut().for_each(|v| *v *= w);
    Image::from_values(n, fine.domain_side(), values).expect("grid size matches")
}

pub fn build_phantom(phantom: &PhantomConfig, geom: &Geometry) -> Result<PhantomData> {
    let (n, fine_n, side) = (geom.grid_n(), geom.forward_grid_n(), geom.domain_side());
    let sample = |f: &dyn Fn(usize) -> Result<Image>| -> Result<(Image, Image)> {
        let fine = f(fine_n)?;
        let truth = if fine_n % n == 0 { block_average(&fine, n) } else { f(n)? };
        Ok((fine, truth))
    };
    Ok(match phantom {
        PhantomConfig::ThreeSquares => {
            let (fine, truth) = sample(&|k| three_squares(k))?;
            PhantomData { fine, truth, analytic: None }
        }
        PhantomConfig::Grains {
            seed,
            num_grains,
            value_range,
            mask_radius,
        } => {
            let spec = GrainsSpec {
                seed: *seed,
                num_grains: *num_grains,
                value_range: *value_range,
                mask_radius: *mask_radius,
            };
            let (fine, truth) = sample(&|k| grains(&spec, k, side))?;
            PhantomData { fine, truth, analytic: None }
        }
        PhantomConfig::SheppLogan { value_scale, analytic } => {
            let mut ph = shepp_logan().scaled(side / 2.0);
            ph.ellipses.iter_mut().for_each(|e| e.rho *= value_scale);
            let (fine, truth) = sample(&|k| Ok(rasterize(&ph, k, side)))?;
            PhantomData {
                fine,
                truth,
                analytic: analytic.then_some(ph),
            }
        }
    })
}

fn encode_sinogram(cfg: &ExperimentConfig, s: &Sinogram) -> (String, Vec<u8>) {
    let fmt = cfg.output.sinogram_format;
    let bytes = match fmt {
        crate::config::SinogramFormat::Csv => encode_sinogram_csv(s),
        crate::config::SinogramFormat::Bin => encode_sinogram_bin(s),
    };
    (fmt.extension().to_string(), bytes)
}

fn decode_sinogram(rel: &str, bytes: &[u8]) -> Result<Sinogram> {
    if rel.ends_with(".bin") {
        decode_sinogram_bin(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Format(format!("{rel} is not UTF-8")))?;
        decode_sinogram_csv(text)
    }
}

fn vector_table(name: &str, v: &[f64]) -> Table {
    let mut t = Table::new(&["detector", name]);
    for (i, x) in v.iter().enumerate() {
        t.push(vec![i.to_string(), x.to_string()]);
    }
    t
}

fn write_image(dir: &mut OutputDir, stem: &str, img: &Image, window: Option<Window>) -> Result<()> {
    dir.write(&format!("{stem}.csv"), &encode_image_csv(img))?;
    if let Some(w) = window {
        dir.write_image_pgm(&format!("{stem}.pgm"), img, w, ATTENUATION_UNIT)?;
    }
    Ok(())
}

fn pgm_window(cfg: &ExperimentConfig, w: [f64; 2]) -> Result<Option<Window>> {
    if cfg.output.write_pgm {
        Window::new(w[0], w[1]).map(Some)
    } else {
        Ok(None)
    }
}

/// Writes the phantom, the noiseless line integrals on the simulation grid
/// and, per set, the true flat-field, the flat samples and the counts.
pub fn simulate(cfg: &ExperimentConfig, root: &Path) -> Result<Manifest> {
    let (geom, phantom, sim) = scan_parts(cfg)?;
    let ph = build_phantom(phantom, &geom)?;
    let integrals = match &ph.analytic {
        Some(e) => analytic_sinogram(e, &geom),
        None => Projector::new(geom.forward_geometry()).forward(&ph.fine)?,
    };
    let sets = set_entries(sim);
    let r = geom.detectors();
    let simulated: Vec<(Vec<f64>, Sinogram, Sinogram)> = sets
        .par_iter()
        .map(|set| {
            let truth = match sim.flatfield {
                FlatFieldMode::Exact => FlatFieldTruth::constant(set.intensity, r)?,
                FlatFieldMode::Poisson => sample_flatfield_truth(set.intensity, r, set.seed)?,
            };
            let flats = sample_flats(&truth, sim.flat_samples, set.seed)?;
            let counts = counts_from_line_integrals(&truth, &integrals, set.seed)?;
            Ok((truth.v, flats, counts))
        })
        .collect::<Result<_>>()?;

    let mut dir = OutputDir::create(&root.join(DATA_DIR), base_manifest("simulate", cfg))?;
    let window = pgm_window(cfg, cfg.output.window)?;
    write_image(&mut dir, "phantom", &ph.fine, window)?;
    write_image(&mut dir, "truth", &ph.truth, window)?;
    let (ext, bytes) = encode_sinogram(cfg, &integrals);
    dir.write(&format!("line_integrals.{ext}"), &bytes)?;
    for (set, (v, flats, counts)) in sets.iter().zip(&simulated) {
        dir.write(&format!("{}/flatfield.csv", set.label), &vector_table("v", v).encode())?;
        let (ext, bytes) = encode_sinogram(cfg, flats);
        dir.write(&format!("{}/flats.{ext}", set.label), &bytes)?;
        let (ext, bytes) = encode_sinogram(cfg, counts);
        dir.write(&format!("{}/counts.{ext}", set.label), &bytes)?;
    }
    dir.manifest_mut().sets = sets;
    dir.finish()
}

/// One measurement set read back from disk.
pub struct DataSet {
    pub entry: SetEntry,
    pub v: Vec<f64>,
    pub flats: Sinogram,
    pub counts: Sinogram,
}

pub struct LoadedData {
    pub manifest: Manifest,
    pub truth: Image,
    pub sets: Vec<DataSet>,
}

fn sinogram_file(m: &Manifest, stem: &str) -> Result<String> {
    ["csv", "bin"]
        .iter()
        .map(|e| format!("{stem}.{e}"))
        .find(|p| m.entry(p).is_some())
        .ok_or_else(|| Error::Format(format!("{stem} is not listed in the data manifest")))
}

pub fn load_data(cfg: &ExperimentConfig, root: &Path) -> Result<LoadedData> {
    let manifest = load_stage(root, DATA_DIR, cfg, "simulate")?;
    let dir = root.join(DATA_DIR);
    let truth = decode_image_csv(&manifest.read_verified_text(&dir, "truth.csv")?)?;
    let sets = manifest
        .sets
        .iter()
        .map(|entry| {
            let v = Table::decode(&manifest.read_verified_text(&dir, &format!("{}/flatfield.csv", entry.label))?)?
                .floats("v")?;
            let read = |stem: &str| -> Result<Sinogram> {
                let rel = sinogram_file(&manifest, &format!("{}/{stem}", entry.label))?;
                decode_sinogram(&rel, &manifest.read_verified(&dir, &rel)?)
            };
            Ok(DataSet {
                entry: entry.clone(),
                v,
                flats: read("flats")?,
                counts: read("counts")?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LoadedData { manifest, truth, sets })
}

/// Output of one model on one set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub image: Vec<f64>,
    /// Flat-field estimate `v_hat(u)`: the model's own for joint models,
    /// otherwise the uniform-prior closed form evaluated at the image.
    pub flatfield: Option<FlatFieldEstimate>,
    pub history: Vec<IterationRecord>,
    /// Names of the tracked metrics stored in each history record.
    pub metric_names: Vec<&'static str>,
    pub lipschitz: f64,
    pub step: f64,
    pub iterations: usize,
    pub note: String,
}

/// Shared, read-only state for the reconstruction jobs of one run.
pub struct ReconContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub projector: &'a Projector,
    pub norm_sq: f64,
    pub support: Vec<bool>,
    pub mask: Vec<bool>,
    pub truth: &'a Image,
    pub stripe_filter: FilterConfig,
}

impl<'a> ReconContext<'a> {
    pub fn new(cfg: &'a ExperimentConfig, projector: &'a Projector, truth: &'a Image) -> Result<Self> {
        let geom = projector.geometry();
        let (n, side) = (geom.grid_n(), geom.domain_side());
        let support_radius = cfg.solver.support_radius.unwrap_or(side / 2.0);
        let needs_norm = cfg.models.iter().any(|m| !m.kind.is_fbp());
        let norm_sq = if needs_norm {
            power_iteration(projector, &power_config(cfg))
        } else {
            0.0
        };
        Ok(Self {
            cfg,
            projector,
            norm_sq,
            support: Image::disk_mask(n, side, support_radius),
            mask: Image::disk_mask(n, side, cfg.analysis.mask_radius),
            truth,
            stripe_filter: FilterConfig::new(cfg.analysis.stripe_epsilon, cfg.analysis.zero_pad_factor)?,
        })
    }

    fn geometry(&self) -> &Geometry {
        self.projector.geometry()
    }
}

fn power_config(cfg: &ExperimentConfig) -> PowerConfig {
    PowerConfig {
        iters: cfg.solver.power_iters,
        seed: 0,
    }
}

/// `log(v_i) - log(y_ij)`, or `log(v_i) - log(y_ij + 1/2)` with the
/// pseudo-count, which also admits zero counts.
fn log_data(counts: &Sinogram, v: &[f64], pseudo_count: bool) -> Result<Vec<f64>> {
    if !pseudo_count {
        return quad_b_vector(counts, v);
    }
    let shifted = Sinogram::from_values(
        counts.rows(),
        counts.cols(),
        SinogramKind::LogRatio,
        counts.values().iter().map(|y| y + 0.5).collect(),
    )?;
    let r = counts.rows();
    if let Some(i) = (0..r).find(|&i| !(v[i] > 0.0)) {
        return Err(Error::ModelDegenerate {
            detectors: vec![i],
            reason: "flat-field estimate must be positive".into(),
        });
    }
    Ok(shifted.values().iter().enumerate().map(|(k, y)| v[k % r].ln() - y.ln()).collect())
}

fn log_ratio(counts: &Sinogram, v: &[f64], pseudo_count: bool) -> Result<Sinogram> {
    Sinogram::from_values(counts.rows(), counts.cols(), SinogramKind::LogRatio, log_data(counts, v, pseudo_count)?)
}

/// Point-mass prior: the flat-field is fixed at `v`.
fn fixed_flatfield(v: &[f64]) -> FlatFieldEstimate {
    let r = v.len();
    FlatFieldEstimate {
        v: v.to_vec(),
        theta_flat: vec![0.0; r],
        theta_object: vec![0.0; r],
        theta_prior: vec![1.0; r],
        v_object: vec![f64::NAN; r],
        v_prior: v.to_vec(),
    }
}

/// Closed-form `v_hat(u)` under a Gamma(alpha, beta) prior.
struct Estimator<'a> {
    jmap: Option<JmapObjective<'a>>,
    fixed: Option<Vec<f64>>,
}

impl Estimator<'_> {
    fn estimate(&self, u: &[f64]) -> Option<FlatFieldEstimate> {
        match (&self.fixed, &self.jmap) {
            (Some(v), _) => Some(fixed_flatfield(v)),
            (None, Some(j)) => j.flatfield_estimate(u).ok(),
            _ => None,
        }
    }
}

fn estimator<'a>(op: &'a dyn LinearOperator, set: &DataSet, prior: &FlatPrior) -> Estimator<'a> {
    match prior {
        FlatPrior::PointMass { v } => Estimator {
            jmap: None,
            fixed: Some(v.clone()),
        },
        FlatPrior::Gamma { alpha, beta } => {
            let jmap = HyperParams::new(alpha.clone(), beta.clone(), 0.0, 1.0)
                .and_then(|hp| {
                    let stats = PrecomputedStats::new(&set.counts, &set.flats, alpha)?;
                    JmapObjective::new(op, stats, &hp)
                })
                .ok();
            Estimator { jmap, fixed: None }
        }
    }
}

fn uniform_prior(r: usize) -> FlatPrior {
    FlatPrior::Gamma {
        alpha: vec![1.0; r],
        beta: vec![0.0; r],
    }
}

/// FBP image of log data, clipped to the support and to nonnegative
/// values; zero counts are floored at 1/2 so the logarithm exists.
fn fbp_init(ctx: &ReconContext<'_>, counts: &Sinogram, v: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let floored = Sinogram::from_values(
        counts.rows(),
        counts.cols(),
        SinogramKind::Counts,
        counts.values().iter().map(|y| y.max(0.5)).collect(),
    )?;
    let cfg = FilterConfig::new(epsilon, ctx.cfg.analysis.zero_pad_factor)?;
    let mut u = fbp(ctx.geometry(), &log_ratio(&floored, v, false)?, &cfg)?.into_values();
    for (x, &inside) in u.iter_mut().zip(&ctx.support) {
        if !inside || *x < 0.0 {
            *x = 0.0;
        }
    }
    Ok(u)
}

/// Runs one configured model on one measurement set.
pub fn run_model(ctx: &ReconContext<'_>, set: &DataSet, model: &ModelConfig) -> Result<ModelRun> {
    let cfg = ctx.cfg;
    let op: &dyn LinearOperator = ctx.projector;
    let geom = ctx.geometry();
    let (n, r) = (geom.grid_n(), geom.detectors());
    let v_f = ml_flatfield(&set.flats)?;
    let counts = &set.counts;
    let pc = model.pseudo_count;
    let mut note = String::new();

    // Flat-field prior of the model, and the prior used to report v_hat(u).
    let prior = if model.kind.has_flat_prior() {
        let p = make_hyperparams(model.strategy(), &v_f)?;
        if p.is_point_mass() {
            note = format!(
                "type-II prior degenerates to a point mass at the flat-field ML estimate; {} reduces to {}",
                model.kind.as_str(),
                if model.kind == ModelKind::Jmap { "amap" } else { "wls" }
            );
        }
        p
    } else {
        uniform_prior(r)
    };
    let report = estimator(op, set, &prior);

    if model.kind.is_fbp() {
        let v = if model.kind == ModelKind::BaselineFbp { &set.v } else { &v_f };
        let fcfg = FilterConfig::new(model.epsilon, cfg.analysis.zero_pad_factor)?;
        let image = fbp(geom, &log_ratio(counts, v, pc)?, &fcfg)?.into_values();
        let flatfield = report.estimate(&image);
        return Ok(ModelRun {
            image,
            flatfield,
            history: Vec::new(),
            metric_names: Vec::new(),
            lipschitz: 0.0,
            step: 0.0,
            iterations: 0,
            note,
        });
    }

    let poisson = |v: Vec<f64>| -> Result<PoissonObjective<'_>> {
        Ok(PoissonObjective::new(op, counts, v)?.with_operator_norm_sq(ctx.norm_sq))
    };
    let objective: Box<dyn SmoothObjective + '_> = match (model.kind, &prior) {
        (ModelKind::Baseline, _) => Box::new(poisson(set.v.clone())?),
        (ModelKind::Amap, _) | (ModelKind::Jmap, FlatPrior::PointMass { .. }) => Box::new(poisson(v_f.clone())?),
        (ModelKind::Jmap, FlatPrior::Gamma { alpha, beta }) => {
            let hp = HyperParams::new(alpha.clone(), beta.clone(), model.gamma, cfg.solver.delta)?;
            let stats = PrecomputedStats::new(counts, &set.flats, alpha)?;
            Box::new(JmapObjective::new(op, stats, &hp)?)
        }
        (ModelKind::Wls, _) | (ModelKind::Swls, FlatPrior::PointMass { .. }) => {
            Box::new(WlsObjective::new(op, counts, log_data(counts, &v_f, pc)?)?)
        }
        (ModelKind::Swls, FlatPrior::Gamma { alpha, .. }) => {
            let b = log_data(counts, &v_f, pc)?;
            Box::new(StripeWlsObjective::swls(op, counts, b, &v_f, alpha, set.flats.cols())?)
        }
        (ModelKind::Wlsz, _) => {
            let lambda = vec![model.lambda.expect("validated: wlsz has lambda"); r];
            Box::new(StripeWlsObjective::wlsz(op, counts, log_data(counts, &v_f, pc)?, &lambda)?)
        }
        (ModelKind::BaselineFbp | ModelKind::Fbp, _) => unreachable!("handled above"),
    };

    let tv = if model.gamma > 0.0 {
        Some(TvConfig::new(cfg.solver.delta, model.gamma)?)
    } else {
        None
    };
    let iters = model
        .iters
        .unwrap_or(if model.gamma > 0.0 { cfg.solver.iters_tv } else { cfg.solver.iters });
    let solver_cfg = |max_iters: usize, init: Init| SolverConfig {
        max_iters,
        step_factor: cfg.solver.step_factor,
        init,
        record_every: cfg.solver.record_every,
        lipschitz_override: None,
        check_descent: cfg.solver.check_descent,
        power: power_config(cfg),
    };

    // Tracked metrics: RAE in the analysis disc and the ring ratio of
    // v_hat(u) against the ML estimate.
    let tracking = cfg.analysis.track_iterations;
    let metric_names: Vec<&'static str> = if tracking { vec!["rae", "rr"] } else { Vec::new() };
    let mut track = |_k: usize, u: &[f64], ff: Option<&FlatFieldEstimate>| -> Vec<f64> {
        let err = rae(u, ctx.truth.values(), Some(&ctx.mask)).unwrap_or(f64::NAN);
        let est = match ff {
            Some(f) => Some(f.v.clone()),
            None => report.estimate(u).map(|f| f.v),
        };
        let rr = est
            .and_then(|v| ring_ratio(&v, &v_f, &set.v, geom, &ctx.stripe_filter).ok())
            .unwrap_or(f64::NAN);
        vec![err, rr]
    };

    let (init, mut history, offset) = match model.init {
        InitKind::Zeros => (Init::Zeros, Vec::new(), 0),
        InitKind::Fbp => {
            let v = if model.kind == ModelKind::Baseline { &set.v } else { &v_f };
            (Init::Image(fbp_init(ctx, &set.counts, v, model.epsilon)?), Vec::new(), 0)
        }
        InitKind::Amap => {
            let warm = PoissonObjective::new(op, &set.counts, v_f.clone())?.with_operator_norm_sq(ctx.norm_sq);
            let problem = make_problem(&warm, n, &ctx.support, tv)?;
            let cb = if tracking { Some(&mut track as &mut MetricCallback<'_>) } else { None };
            let res = prox_gradient(&problem, &solver_cfg(model.warm_iters, Init::Zeros), cb)?;
            (Init::Image(res.image), res.history, model.warm_iters)
        }
    };
    let problem = make_problem(objective.as_ref(), n, &ctx.support, tv)?;
    let cb = if tracking { Some(&mut track as &mut MetricCallback<'_>) } else { None };
    let res = prox_gradient(&problem, &solver_cfg(iters, init), cb)?;
    let skip = usize::from(offset > 0);
    history.extend(res.history.into_iter().skip(skip).map(|mut h| {
        h.iter += offset;
        h
    }));
    let flatfield = match (&prior, model.kind) {
        (FlatPrior::Gamma { .. }, ModelKind::Jmap) => res.flatfield,
        _ => report.estimate(&res.image),
    };
    Ok(ModelRun {
        image: res.image,
        flatfield,
        history,
        metric_names,
        lipschitz: res.lipschitz,
        step: res.step,
        iterations: offset + res.iterations,
        note,
    })
}

fn make_problem<'p>(obj: &'p dyn SmoothObjective, n: usize, support: &'p [bool], tv: Option<TvConfig>) -> Result<Problem<'p>> {
    let p = Problem::new(obj, n)?.with_support(support)?;
    Ok(match tv {
        Some(t) => p.with_tv(t),
        None => p,
    })
}

fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::ModelDegenerate { .. } | Error::PositivityViolation { .. })
}

fn failure_entry(set: &str, model: &str, e: &Error) -> FailureEntry {
    let detectors = match e {
        Error::ModelDegenerate { detectors, .. } => detectors.clone(),
        Error::PositivityViolation { cells, .. } => {
            let mut d: Vec<usize> = cells.iter().map(|c| c.0).collect();
            d.dedup();
            d
        }
        _ => Vec::new(),
    };
    FailureEntry {
        set: set.into(),
        model: model.into(),
        error: e.to_string(),
        detectors,
    }
}

/// Result of a batch stage: the manifest, and per failure whether it was a
/// model-degenerate error.
#[derive(Debug)]
pub struct BatchOutcome {
    pub manifest: Manifest,
    pub degenerate_failures: usize,
    pub other_failures: usize,
}

fn flatfield_table(ff: &FlatFieldEstimate) -> Table {
    let mut t = Table::new(&["detector", "v_hat", "theta_flat", "theta_object", "theta_prior"]);
    for i in 0..ff.v.len() {
        t.push(vec![
            i.to_string(),
            ff.v[i].to_string(),
            ff.theta_flat[i].to_string(),
            ff.theta_object[i].to_string(),
            ff.theta_prior[i].to_string(),
        ]);
    }
    t
}

fn history_table(run: &ModelRun) -> Table {
    let mut header = vec!["iter", "objective"];
    header.extend(run.metric_names.iter().copied());
    let mut t = Table::new(&header);
    for h in &run.history {
        let mut row = vec![h.iter.to_string(), h.objective.to_string()];
        row.extend(h.metrics.iter().map(|m| m.to_string()));
        t.push(row);
    }
    t
}

fn summary_toml(run: &ModelRun, model: &ModelConfig) -> String {
    let mut t = toml::Table::new();
    t.insert("model".into(), model.label().into());
    t.insert("kind".into(), model.kind.as_str().into());
    t.insert("iterations".into(), (run.iterations as i64).into());
    t.insert("lipschitz".into(), run.lipschitz.into());
    t.insert("step".into(), run.step.into());
    if !run.note.is_empty() {
        t.insert("note".into(), run.note.clone().into());
    }
    toml::to_string(&t).expect("plain table serializes")
}

/// Reconstructs every set with every configured model.
pub fn reconstruct(cfg: &ExperimentConfig, root: &Path) -> Result<BatchOutcome> {
    let geom = cfg.geometry()?;
    let data = load_data(cfg, root)?;
    let mut dir = OutputDir::create(&root.join(RECON_DIR), base_manifest("reconstruct", cfg))?;
    dir.manifest_mut().sets = data.manifest.sets.clone();
    if cfg.models.is_empty() {
        return Ok(BatchOutcome {
            manifest: dir.finish()?,
            degenerate_failures: 0,
            other_failures: 0,
        });
    }
    let projector = Projector::cached(geom.clone());
    let ctx = ReconContext::new(cfg, &projector, &data.truth)?;
    let jobs: Vec<(usize, usize)> = (0..data.sets.len())
        .flat_map(|s| (0..cfg.models.len()).map(move |m| (s, m)))
        .collect();
    let runs: Vec<Result<ModelRun>> = jobs
        .par_iter()
        .map(|&(s, m)| run_model(&ctx, &data.sets[s], &cfg.models[m]))
        .collect();

    let window = pgm_window(cfg, cfg.output.window)?;
    let (mut degenerate, mut other) = (0, 0);
    let mut failures = Vec::new();
    for (&(s, m), run) in jobs.iter().zip(runs) {
        let set = &data.sets[s].entry.label;
        let model = &cfg.models[m];
        let stem = format!("{set}/{}", model.label());
        match run {
            Ok(run) => {
                let img = Image::from_values(geom.grid_n(), geom.domain_side(), run.image.clone())?;
                write_image(&mut dir, &format!("{stem}/image"), &img, window)?;
                if let Some(ff) = &run.flatfield {
                    dir.write(&format!("{stem}/flatfield.csv"), &flatfield_table(ff).encode())?;
                }
                if !run.history.is_empty() {
                    dir.write(&format!("{stem}/history.csv"), &history_table(&run).encode())?;
                }
                dir.write(&format!("{stem}/run.toml"), summary_toml(&run, model).as_bytes())?;
            }
            Err(e) => {
                if is_degenerate(&e) {
                    degenerate += 1;
                } else {
                    other += 1;
                }
                failures.push(failure_entry(set, &model.label(), &e));
            }
        }
    }
    let mut t = Table::new(&["set", "model", "detectors", "error"]);
    for f in &failures {
        let dets: Vec<String> = f.detectors.iter().map(|d| d.to_string()).collect();
        t.push(vec![
            f.set.clone(),
            f.model.clone(),
            dets.join(" "),
            f.error.replace(',', ";"),
        ]);
    }
    dir.write("failures.csv", &t.encode())?;
    dir.manifest_mut().failures = failures;
    Ok(BatchOutcome {
        manifest: dir.finish()?,
        degenerate_failures: degenerate,
        other_failures: other,
    })
}

struct ReconResult {
    set: usize,
    model: usize,
    image: Vec<f64>,
    v_hat: Option<Vec<f64>>,
    flatfield: Option<Table>,
    history: Option<Table>,
}

fn load_recon(cfg: &ExperimentConfig, root: &Path, data: &LoadedData) -> Result<(Manifest, Vec<ReconResult>)> {
    let m = load_stage(root, RECON_DIR, cfg, "reconstruct")?;
    if m.sets != data.manifest.sets {
        return Err(Error::Format(
            "mismatched manifests: reconstruction and data list different measurement sets".into(),
        ));
    }
    let dir = root.join(RECON_DIR);
    let mut out = Vec::new();
    for (s, set) in data.sets.iter().enumerate() {
        for (k, model) in cfg.models.iter().enumerate() {
            let stem = format!("{}/{}", set.entry.label, model.label());
            if m.failures.iter().any(|f| f.set == set.entry.label && f.model == model.label()) {
                continue;
            }
            let image = decode_image_csv(&m.read_verified_text(&dir, &format!("{stem}/image.csv"))?)?.into_values();
            let ff_rel = format!("{stem}/flatfield.csv");
            let flatfield = match m.entry(&ff_rel) {
                Some(_) => Some(Table::decode(&m.read_verified_text(&dir, &ff_rel)?)?),
                None => None,
            };
            let hist_rel = format!("{stem}/history.csv");
            let history = match m.entry(&hist_rel) {
                Some(_) => Some(Table::decode(&m.read_verified_text(&dir, &hist_rel)?)?),
                None => None,
            };
            let v_hat = flatfield.as_ref().map(|t| t.floats("v_hat")).transpose()?;
            out.push(ReconResult {
                set: s,
                model: k,
                image,
                v_hat,
                flatfield,
                history,
            });
        }
    }
    Ok((m, out))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Metrics of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub set: String,
    pub intensity: f64,
    pub seed: u64,
    pub model: String,
    pub rae: f64,
    pub rae_disk: f64,
    pub ssim: f64,
    pub rfe: f64,
    pub rr: f64,
}

/// Computes all configured reports from simulated data and reconstructions.
pub fn analyze(cfg: &ExperimentConfig, root: &Path) -> Result<Manifest> {
    let geom = cfg.geometry()?;
    let data = load_data(cfg, root)?;
    let (recon_manifest, recons) = if cfg.models.is_empty() {
        (None, Vec::new())
    } else {
        let (m, r) = load_recon(cfg, root, &data)?;
        (Some(m), r)
    };
    let (n, side) = (geom.grid_n(), geom.domain_side());
    let truth = data.truth.values();
    let mask = Image::disk_mask(n, side, cfg.analysis.mask_radius);
    let filter = FilterConfig::new(cfg.analysis.stripe_epsilon, cfg.analysis.zero_pad_factor)?;
    let ssim_range = cfg
        .analysis
        .ssim_range
        .unwrap_or_else(|| truth.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE));
    let v_f: Vec<Vec<f64>> = data.sets.iter().map(|s| ml_flatfield(&s.flats)).collect::<Result<_>>()?;

    let mut dir = OutputDir::create(&root.join(ANALYSIS_DIR), base_manifest("analyze", cfg))?;
    dir.manifest_mut().sets = data.manifest.sets.clone();
    if let Some(m) = &recon_manifest {
        dir.manifest_mut().failures = m.failures.clone();
    }

    // Per-reconstruction metrics.
    let rows: Vec<MetricRow> = recons
        .par_iter()
        .map(|rec| {
            let set = &data.sets[rec.set];
            let (rfe_v, rr) = match &rec.v_hat {
                Some(v) => (
                    rfe(v, &set.v)?,
                    ring_ratio(v, &v_f[rec.set], &set.v, &geom, &filter)?,
                ),
                None => (f64::NAN, f64::NAN),
            };
            Ok(MetricRow {
                set: set.entry.label.clone(),
                intensity: set.entry.intensity,
                seed: set.entry.seed,
                model: cfg.models[rec.model].label(),
                rae: rae(&rec.image, truth, None)?,
                rae_disk: rae(&rec.image, truth, Some(&mask))?,
                ssim: ssim(&rec.image, truth, n, cfg.analysis.ssim_sigma, ssim_range)?,
                rfe: rfe_v,
                rr,
            })
        })
        .collect::<Result<_>>()?;

    if !cfg.models.is_empty() {
        let mut t = Table::new(&[
            "set", "intensity", "seed", "model", "kind", "beta", "gamma", "rae", "rae_disk", "ssim", "rfe", "rr",
        ]);
        for (row, rec) in rows.iter().zip(&recons) {
            let m = &cfg.models[rec.model];
            t.push(vec![
                row.set.clone(),
                row.intensity.to_string(),
                row.seed.to_string(),
                row.model.clone(),
                m.kind.as_str().into(),
                m.beta.to_string(),
                m.gamma.to_string(),
                fmt_metric(row.rae),
                fmt_metric(row.rae_disk),
                fmt_metric(row.ssim),
                fmt_metric(row.rfe),
                fmt_metric(row.rr),
            ]);
        }
        dir.write("metrics.csv", &t.encode())?;

        let mut s = Table::new(&[
            "intensity", "model", "kind", "beta", "gamma", "runs", "failed", "rae", "rae_disk", "ssim", "rfe", "rr",
        ]);
        let intensities = &cfg.simulation.as_ref().expect("scan config").intensities;
        for &intensity in intensities {
            for (k, m) in cfg.models.iter().enumerate() {
                let sel: Vec<&MetricRow> = rows
                    .iter()
                    .zip(&recons)
                    .filter(|(r, rec)| rec.model == k && r.intensity == intensity)
                    .map(|(r, _)| r)
                    .collect();
                let col = |f: fn(&MetricRow) -> f64| fmt_metric(mean(&sel.iter().map(|r| f(r)).collect::<Vec<_>>()));
                let failed = dir
                    .manifest_mut()
                    .failures
                    .iter()
                    .filter(|f| f.model == m.label() && data.sets.iter().any(|s| s.entry.label == f.set && s.entry.intensity == intensity))
                    .count();
                s.push(vec![
                    intensity.to_string(),
                    m.label(),
                    m.kind.as_str().into(),
                    m.beta.to_string(),
                    m.gamma.to_string(),
                    sel.len().to_string(),
                    failed.to_string(),
                    col(|r| r.rae),
                    col(|r| r.rae_disk),
                    col(|r| r.ssim),
                    col(|r| r.rfe),
                    col(|r| r.rr),
                ]);
            }
        }
        dir.write("summary.csv", &s.encode())?;
    }

    if cfg.analysis.track_iterations {
        let mut t = Table::new(&["set", "model", "iter", "objective", "rae", "rr"]);
        for rec in &recons {
            let Some(h) = &rec.history else { continue };
            let (it, obj) = (h.column("iter")?, h.column("objective")?);
            let (ra, rr) = (h.column("rae")?, h.column("rr")?);
            for row in &h.rows {
                let num = |k: usize| row[k].parse::<f64>().map(fmt_metric).unwrap_or_else(|_| "nan".into());
                t.push(vec![
                    data.sets[rec.set].entry.label.clone(),
                    cfg.models[rec.model].label(),
                    row[it].clone(),
                    row[obj].clone(),
                    num(ra),
                    num(rr),
                ]);
            }
        }
        dir.write("iterations.csv", &t.encode())?;
    }

    if cfg.analysis.ring_magnitude {
        let norms: Vec<f64> = data
            .sets
            .par_iter()
            .zip(&v_f)
            .map(|(set, vf)| {
                let psi = stripe_image(&geom, &set.v, vf, &filter)?;
                Ok(psi.values().iter().map(|x| x * x).sum::<f64>().sqrt())
            })
            .collect::<Result<_>>()?;
        let mut t = Table::new(&["set", "intensity", "seed", "psi_norm"]);
        for (set, norm) in data.sets.iter().zip(&norms) {
            t.push(vec![
                set.entry.label.clone(),
                set.entry.intensity.to_string(),
                set.entry.seed.to_string(),
                fmt_metric(*norm),
            ]);
        }
        dir.write("ring_magnitude.csv", &t.encode())?;
        let mut s = Table::new(&["intensity", "sets", "mean_psi_norm", "mean_psi_norm_times_sqrt_intensity"]);
        let intensities = &cfg.simulation.as_ref().expect("scan config").intensities;
        for &intensity in intensities {
            let sel: Vec<f64> = data
                .sets
                .iter()
                .zip(&norms)
                .filter(|(set, _)| set.entry.intensity == intensity)
                .map(|(_, &x)| x)
                .collect();
            let m = mean(&sel);
            s.push(vec![
                intensity.to_string(),
                sel.len().to_string(),
                fmt_metric(m),
                fmt_metric(m * intensity.sqrt()),
            ]);
        }
        dir.write("ring_summary.csv", &s.encode())?;
    }

    if !recons.is_empty() {
        let mut t = Table::new(&["set", "model", "detector", "v", "v_f_hat", "v_hat", "theta_flat", "theta_object", "theta_prior"]);
        for rec in &recons {
            let Some(ff) = &rec.flatfield else { continue };
            let set = &data.sets[rec.set];
            let cols = ["v_hat", "theta_flat", "theta_object", "theta_prior"]
                .iter()
                .map(|c| ff.column(c))
                .collect::<Result<Vec<_>>>()?;
            for (i, row) in ff.rows.iter().enumerate() {
                let mut out = vec![
                    set.entry.label.clone(),
                    cfg.models[rec.model].label(),
                    i.to_string(),
                    set.v[i].to_string(),
                    v_f[rec.set][i].to_string(),
                ];
                out.extend(cols.iter().map(|&c| row[c].clone()));
                t.push(out);
            }
        }
        dir.write("theta.csv", &t.encode())?;
    }

    if cfg.analysis.stripe_images {
        let stripes: Vec<(String, Image)> = recons
            .par_iter()
            .filter_map(|rec| rec.v_hat.as_ref().map(|v| (rec, v)))
            .map(|(rec, v)| {
                let set = &data.sets[rec.set];
                let psi = stripe_image(&geom, &set.v, v, &filter)?;
                Ok((format!("stripes/{}/{}", set.entry.label, cfg.models[rec.model].label()), psi))
            })
            .collect::<Result<_>>()?;
        for (stem, psi) in &stripes {
            dir.write(&format!("{stem}.csv"), &encode_image_csv(psi))?;
            if cfg.output.write_pgm {
                // the PGM shows |psi_v|
                let abs = Image::from_values(n, side, psi.values().iter().map(|x| x.abs()).collect())?;
                let w = match cfg.output.stripe_window {
                    Some([lo, hi]) => Window::new(lo, hi)?,
                    None => Window::new(0.0, Window::symmetric(abs.values()).high)?,
                };
                dir.write_image_pgm(&format!("{stem}.pgm"), &abs, w, "1")?;
            }
        }
    }

    if cfg.analysis.bias_maps && !recons.is_empty() {
        let mut t = Table::new(&["intensity", "model", "runs", "mean_abs_bias_disk", "mean_std_disk"]);
        let intensities = cfg.simulation.as_ref().expect("scan config").intensities.clone();
        for intensity in intensities {
            for (k, m) in cfg.models.iter().enumerate() {
                let imgs: Vec<&[f64]> = recons
                    .iter()
                    .filter(|r| r.model == k && data.sets[r.set].entry.intensity == intensity)
                    .map(|r| r.image.as_slice())
                    .collect();
                if imgs.is_empty() {
                    continue;
                }
                let cnt = imgs.len() as f64;
                let avg: Vec<f64> = (0..n * n).map(|p| imgs.iter().map(|im| im[p]).sum::<f64>() / cnt).collect();
                let bias: Vec<f64> = avg.iter().zip(truth).map(|(a, t)| a - t).collect();
                let std: Vec<f64> = (0..n * n)
                    .map(|p| {
                        let var = imgs.iter().map(|im| (im[p] - avg[p]).powi(2)).sum::<f64>() / (cnt - 1.0).max(1.0);
                        var.sqrt()
                    })
                    .collect();
                let in_disk = |x: &[f64], f: fn(f64) -> f64| {
                    mean(&x.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| f(*v)).collect::<Vec<_>>())
                };
                let stem = format!("bias/i{intensity}/{}", m.label());
                let bias_img = Image::from_values(n, side, bias.clone())?;
                let std_img = Image::from_values(n, side, std.clone())?;
                dir.write(&format!("{stem}_bias.csv"), &encode_image_csv(&bias_img))?;
                dir.write(&format!("{stem}_std.csv"), &encode_image_csv(&std_img))?;
                if cfg.output.write_pgm {
                    let [bl, bh] = cfg.output.bias_window;
                    let [sl, sh] = cfg.output.std_window;
                    dir.write_image_pgm(&format!("{stem}_bias.pgm"), &bias_img, Window::new(bl, bh)?, ATTENUATION_UNIT)?;
                    dir.write_image_pgm(&format!("{stem}_std.pgm"), &std_img, Window::new(sl, sh)?, ATTENUATION_UNIT)?;
                }
                t.push(vec![
                    intensity.to_string(),
                    m.label(),
                    imgs.len().to_string(),
                    fmt_metric(in_disk(&bias, f64::abs)),
                    fmt_metric(in_disk(&std, |x| x)),
                ]);
            }
        }
        dir.write("bias_summary.csv", &t.encode())?;
    }

    dir.finish()
}

/// Radial ring profiles, their extrema and the extremum envelope.
pub fn profile(cfg: &ExperimentConfig, root: &Path) -> Result<Manifest> {
    let p: &ProfileConfig = cfg
        .profile
        .as_ref()
        .ok_or_else(|| Error::Config("profile section is required for this command".into()))?;
    let mut dir = OutputDir::create(&root.join(PROFILE_DIR), base_manifest("profile", cfg))?;
    let mut samples = Table::new(&["t0", "rho", "value"]);
    let mut extrema = Table::new(&["t0", "rho", "value"]);
    for &t0 in &p.t0 {
        let prof = RingProfile::new(t0, p.epsilon)?;
        for k in 0..p.samples {
            let rho = -p.rho_max + 2.0 * p.rho_max * k as f64 / (p.samples - 1) as f64;
            samples.push(vec![t0.to_string(), rho.to_string(), prof.value(rho).to_string()]);
        }
        for e in prof.extrema()? {
            extrema.push(vec![t0.to_string(), e.rho.to_string(), e.value.to_string()]);
        }
    }
    let step = (p.envelope_max - p.envelope_min) / (p.envelope_points - 1) as f64;
    let positive: Vec<f64> = (0..p.envelope_points).map(|k| p.envelope_min + k as f64 * step).collect();
    let grid: Vec<f64> = positive.iter().rev().map(|t| -t).chain(positive.iter().copied()).collect();
    let mut env = Table::new(&["t0", "max", "min"]);
    for e in envelope(p.epsilon, &grid)? {
        env.push(vec![e.t0.to_string(), e.max.to_string(), e.min.to_string()]);
    }
    dir.write("profile.csv", &samples.encode())?;
    dir.write("extrema.csv", &extrema.encode())?;
    dir.write("envelope.csv", &env.encode())?;
    dir.finish()
}

/// Everything the configuration asks for, in order.
pub fn run_all(cfg: &ExperimentConfig, root: &Path) -> Result<Option<BatchOutcome>> {
    let mut outcome = None;
    if cfg.simulation.is_some() {
        simulate(cfg, root)?;
        outcome = Some(reconstruct(cfg, root)?);
        analyze(cfg, root)?;
    }
    if cfg.profile.is_some() {
        profile(cfg, root)?;
    }
    Ok(outcome)
}
