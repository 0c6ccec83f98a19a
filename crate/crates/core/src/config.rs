//! Experiment configuration: one TOML file fully determines a run.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngleSpan, Geometry};
use crate::io::{sha256_hex, Window};
use crate::phantoms::GrainsSpec;
use crate::priors::FlatPriorStrategy;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub detectors: usize,
    pub projections: usize,
    /// cm
    pub detector_width: f64,
    /// cm
    pub domain_side: f64,
    pub grid_n: usize,
    /// Simulation grid; twice `grid_n` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_grid_n: Option<usize>,
    #[serde(default = "default_span")]
    pub span: AngleSpan,
}

fn default_span() -> AngleSpan {
    AngleSpan::Half
}

impl GeometryConfig {
    pub fn build(&self) -> Result<Geometry> {
        let g = Geometry::parallel(
            self.detectors,
            self.projections,
            self.detector_width,
            self.domain_side,
            self.grid_n,
            self.span,
        )?;
        match self.forward_grid_n {
            None => Ok(g),
            Some(f) => Geometry::new(
                g.detectors(),
                g.detector_width(),
                g.angles().to_vec(),
                g.domain_side(),
                g.grid_n(),
                f,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhantomConfig {
    /// Nested squares on a 1 cm domain.
    ThreeSquares,
    Grains {
        #[serde(default = "grains_seed")]
        seed: u64,
        #[serde(default = "grains_count")]
        num_grains: usize,
        #[serde(default = "grains_range")]
        value_range: [f64; 2],
        #[serde(default = "grains_radius")]
        mask_radius: f64,
    },
    /// Modified Shepp-Logan fitted to the domain, attenuation values times
    /// `value_scale`. With `analytic` the data use exact line integrals.
    SheppLogan {
        #[serde(default = "one")]
        value_scale: f64,
        #[serde(default = "yes")]
        analytic: bool,
    },
}

fn grains_seed() -> u64 {
    GrainsSpec::default().seed
}
fn grains_count() -> usize {
    GrainsSpec::default().num_grains
}
fn grains_range() -> [f64; 2] {
    GrainsSpec::default().value_range
}
fn grains_radius() -> f64 {
    GrainsSpec::default().mask_radius
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlatFieldMode {
    /// `v = I0 * 1`
    Exact,
    /// `v_i ~ Poisson(I0)`
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Source intensities `I0`; one measurement set per intensity and seed.
    pub intensities: Vec<f64>,
    pub flat_samples: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_ff_mode")]
    pub flatfield: FlatFieldMode,
}

fn default_ff_mode() -> FlatFieldMode {
    FlatFieldMode::Poisson
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// FBP with the true flat-field.
    BaselineFbp,
    /// FBP with the flat-field ML estimate.
    Fbp,
    /// Poisson MAP with the true flat-field.
    Baseline,
    /// Poisson MAP with the flat-field ML estimate plugged in.
    Amap,
    /// Joint image and flat-field MAP.
    Jmap,
    /// Weighted least squares on log data.
    Wls,
    /// Weighted least squares with stripe-correlated weights (from the
    /// joint model).
    Swls,
    /// Weighted least squares with a free stripe variance `lambda`.
    Wlsz,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::BaselineFbp => "baseline-fbp",
            ModelKind::Fbp => "fbp",
            ModelKind::Baseline => "baseline",
            ModelKind::Amap => "amap",
            ModelKind::Jmap => "jmap",
            ModelKind::Wls => "wls",
            ModelKind::Swls => "swls",
            ModelKind::Wlsz => "wlsz",
        }
    }

    pub fn is_fbp(self) -> bool {
        matches!(self, ModelKind::BaselineFbp | ModelKind::Fbp)
    }

    pub fn uses_log_data(self) -> bool {
        matches!(
            self,
            ModelKind::BaselineFbp | ModelKind::Fbp | ModelKind::Wls | ModelKind::Swls | ModelKind::Wlsz
        )
    }

    pub fn has_flat_prior(self) -> bool {
        matches!(self, ModelKind::Jmap | ModelKind::Swls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Gamma prior with `alpha = 1 + beta v_f` and rate `beta`.
    FlatEmphasis,
    Uniform,
    Jeffreys,
    TypeIi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Zeros,
    /// FBP of the model's own log data (the true flat-field for the
    /// baseline, the ML estimate otherwise).
    Fbp,
    /// `warm_iters` AMAP iterations from zero.
    Amap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "default_prior")]
    pub prior: PriorKind,
    #[serde(default)]
    pub beta: f64,
    /// TV weight; 0 disables the TV term.
    #[serde(default)]
    pub gamma: f64,
    /// Stripe variance for `wlsz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default = "default_warm")]
    pub warm_iters: usize,
    /// Overrides the solver iteration count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    /// Adds 1/2 to every count before taking logs (log-data models only).
    #[serde(default)]
    pub pseudo_count: bool,
    /// FBP apodization for `fbp` kinds and FBP initializations.
    #[serde(default)]
    pub epsilon: f64,
}

fn default_prior() -> PriorKind {
    PriorKind::FlatEmphasis
}
fn default_init() -> InitKind {
    InitKind::Zeros
}
fn default_warm() -> usize {
    50
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            label: None,
            prior: PriorKind::FlatEmphasis,
            beta: 0.0,
            gamma: 0.0,
            lambda: None,
            init: InitKind::Zeros,
            warm_iters: 50,
            iters: None,
            pseudo_count: false,
            epsilon: 0.0,
        }
    }

    pub fn strategy(&self) -> FlatPriorStrategy {
        match self.prior {
            PriorKind::FlatEmphasis => FlatPriorStrategy::FlatEmphasis { beta: self.beta },
            PriorKind::Uniform => FlatPriorStrategy::Uniform,
            PriorKind::Jeffreys => FlatPriorStrategy::Jeffreys,
            PriorKind::TypeIi => FlatPriorStrategy::TypeII,
        }
    }

    /// Label used for directories and table rows.
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let mut s = self.kind.as_str().to_string();
        if self.kind.has_flat_prior() {
            match self.prior {
                PriorKind::FlatEmphasis => s.push_str(&format!("-b{}", self.beta)),
                PriorKind::Uniform => s.push_str("-uniform"),
                PriorKind::Jeffreys => s.push_str("-jeffreys"),
                PriorKind::TypeIi => s.push_str("-type2"),
            }
        }
        if let (ModelKind::Wlsz, Some(l)) = (self.kind, self.lambda) {
            s.push_str(&format!("-l{l}"));
        }
        if self.gamma > 0.0 {
            s.push_str(&format!("-tv{}", self.gamma));
        }
        match self.init {
            InitKind::Zeros => {}
            InitKind::Fbp => s.push_str("-init-fbp"),
            InitKind::Amap => s.push_str(&format!("-init-amap{}", self.warm_iters)),
        }
        if self.pseudo_count {
            s.push_str("-pc");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub iters: usize,
    /// Iterations for models with a TV term.
    pub iters_tv: usize,
    pub step_factor: f64,
    pub record_every: usize,
    /// Huber parameter of the smoothed TV term.
    pub delta: f64,
    pub power_iters: usize,
    /// Radius (cm) of the circular reconstruction support; the inscribed
    /// disc when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_radius: Option<f64>,
    pub check_descent: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            iters: 500,
            iters_tv: 1500,
            step_factor: 1.8,
            record_every: 10,
            delta: 0.01,
            power_iters: 100,
            support_radius: None,
            check_descent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Radius (cm) of the disc used for the masked RAE.
    pub mask_radius: f64,
    pub ssim_sigma: f64,
    /// SSIM dynamic range; the maximum of the true image when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_range: Option<f64>,
    /// Apodization of the FBP used for stripe images.
    pub stripe_epsilon: f64,
    pub zero_pad_factor: usize,
    /// Record RAE and ring ratio at every history point.
    pub track_iterations: bool,
    pub ring_magnitude: bool,
    pub stripe_images: bool,
    pub bias_maps: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            mask_radius: 0.8,
            ssim_sigma: 0.2,
            ssim_range: None,
            stripe_epsilon: 0.0,
            zero_pad_factor: 4,
            track_iterations: false,
            ring_magnitude: false,
            stripe_images: false,
            bias_maps: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinogramFormat {
    Csv,
    Bin,
}

impl SinogramFormat {
    pub fn extension(self) -> &'static str {
        match self {
            SinogramFormat::Csv => "csv",
            SinogramFormat::Bin => "bin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    /// Display window (cm^-1) for reconstructions and phantoms.
    pub window: [f64; 2],
    /// Display window for stripe images; symmetric around zero per image
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stripe_window: Option<[f64; 2]>,
    pub bias_window: [f64; 2],
    pub std_window: [f64; 2],
    pub sinogram_format: SinogramFormat,
    pub write_pgm: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            window: [0.0, 1.2],
            stripe_window: None,
            bias_window: [-0.1, 0.1],
            std_window: [0.0, 0.06],
            sinogram_format: SinogramFormat::Csv,
            write_pgm: true,
        }
    }
}

impl OutputConfig {
    pub fn image_window(&self) -> Result<Window> {
        Window::new(self.window[0], self.window[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub t0: Vec<f64>,
    pub epsilon: f64,
    /// Sampled radii are `[-rho_max, rho_max]`.
    pub rho_max: f64,
    pub samples: usize,
    /// Envelope over `t0` in `[envelope_min, envelope_max]`, both signs.
    pub envelope_min: f64,
    pub envelope_max: f64,
    pub envelope_points: usize,
}

impl ExperimentConfig {
    /// Parses and validates TOML text; errors carry line and field details.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Hash of everything that determines the results (the output directory
    /// is excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output.directory.clear();
        sha256_hex(c.to_toml().as_bytes())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        if let Some(sim) = &mut self.simulation {
            sim.seeds = vec![seed];
        }
        self
    }

    pub fn geometry(&self) -> Result<Geometry> {
        match &self.geometry {
            Some(g) => g.build(),
            None => config_err("geometry section is required for this command"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return config_err("name: must not be empty");
        }
        let has_scan = self.geometry.is_some() || self.phantom.is_some() || self.simulation.is_some();
        if has_scan && !(self.geometry.is_some() && self.phantom.is_some() && self.simulation.is_some()) {
            return config_err("geometry, phantom and simulation sections must be given together");
        }
        if !self.models.is_empty() && !has_scan {
            return config_err("models need geometry, phantom and simulation sections");
        }
        if !has_scan && self.profile.is_none() {
            return config_err("nothing to do: give a scan (geometry, phantom, simulation) or a profile section");
        }
        if let Some(g) = &self.geometry {
            self.validate_geometry(g)?;
        }
        if let Some(s) = &self.simulation {
            validate_simulation(s)?;
        }
        if let (Some(p), Some(g)) = (&self.phantom, &self.geometry) {
            validate_phantom(p, g)?;
        }
        self.validate_solver()?;
        self.validate_models()?;
        self.validate_analysis()?;
        self.validate_output()?;
        if let Some(p) = &self.profile {
            validate_profile(p)?;
        }
        Ok(())
    }

    fn validate_geometry(&self, g: &GeometryConfig) -> Result<()> {
        if g.detectors == 0 || g.projections == 0 {
            return config_err("geometry: detectors and projections must be positive");
        }
        if g.grid_n < 2 {
            return config_err("geometry.grid_n: must be at least 2");
        }
        if !(g.detector_width > 0.0 && g.domain_side > 0.0) {
            return config_err("geometry: detector_width and domain_side must be positive");
        }
        g.build().map(|_| ()).map_err(|e| Error::Config(format!("geometry: {e}")))
    }

    fn validate_solver(&self) -> Result<()> {
        let s = &self.solver;
        if s.iters == 0 || s.iters_tv == 0 {
            return config_err("solver: iteration counts must be positive");
        }
        if !(s.step_factor > 0.0 && s.step_factor < 2.0) {
            return config_err(format!("solver.step_factor: must lie in (0, 2), got {}", s.step_factor));
        }
        if s.record_every == 0 {
            return config_err("solver.record_every: must be positive");
        }
        if !(s.delta > 0.0) {
            return config_err("solver.delta: must be positive");
        }
        if s.power_iters == 0 {
            return config_err("solver.power_iters: must be positive");
        }
        if let Some(r) = s.support_radius {
            if !(r > 0.0) {
                return config_err("solver.support_radius: must be positive");
            }
        }
        Ok(())
    }

    fn validate_models(&self) -> Result<()> {
        let mut labels = HashSet::new();
        for (k, m) in self.models.iter().enumerate() {
            let at = |msg: String| Error::Config(format!("models[{k}] ({}): {msg}", m.kind.as_str()));
            if !(m.beta >= 0.0 && m.beta.is_finite()) {
                return Err(at(format!("beta must be nonnegative, got {}", m.beta)));
            }
            if !(m.gamma >= 0.0 && m.gamma.is_finite()) {
                return Err(at(format!("gamma must be nonnegative, got {}", m.gamma)));
            }
            if !(m.epsilon >= 0.0) {
                return Err(at("epsilon must be nonnegative".into()));
            }
            if !m.kind.has_flat_prior() && (m.beta != 0.0 || m.prior != PriorKind::FlatEmphasis) {
                return Err(at("beta and prior apply only to jmap and swls".into()));
            }
            match (m.kind, m.lambda) {
                (ModelKind::Wlsz, None) => return Err(at("lambda is required".into())),
                (ModelKind::Wlsz, Some(l)) if !(l > 0.0) => return Err(at("lambda must be positive".into())),
                (ModelKind::Wlsz, _) => {}
                (_, Some(_)) => return Err(at("lambda applies only to wlsz".into())),
                _ => {}
            }
            if m.kind.is_fbp() && (m.gamma > 0.0 || m.init != InitKind::Zeros || m.iters.is_some()) {
                return Err(at("fbp models take no solver options".into()));
            }
            if m.pseudo_count && !m.kind.uses_log_data() {
                return Err(at("pseudo_count applies only to log-data models".into()));
            }
            if m.iters == Some(0) || (m.init == InitKind::Amap && m.warm_iters == 0) {
                return Err(at("iteration counts must be positive".into()));
            }
            if !labels.insert(m.label()) {
                return Err(at(format!("duplicate model label {:?}", m.label())));
            }
        }
        Ok(())
    }

    fn validate_analysis(&self) -> Result<()> {
        let a = &self.analysis;
        if !(a.mask_radius > 0.0) || !(a.ssim_sigma > 0.0) {
            return config_err("analysis: mask_radius and ssim_sigma must be positive");
        }
        if let Some(r) = a.ssim_range {
            if !(r > 0.0) {
                return config_err("analysis.ssim_range: must be positive");
            }
        }
        if !(a.stripe_epsilon >= 0.0) || a.zero_pad_factor < 1 {
            return config_err("analysis: stripe_epsilon must be nonnegative and zero_pad_factor at least 1");
        }
        Ok(())
    }

    fn validate_output(&self) -> Result<()> {
        let o = &self.output;
        let windows = [Some(o.window), o.stripe_window, Some(o.bias_window), Some(o.std_window)];
        for w in windows.into_iter().flatten() {
            Window::new(w[0], w[1]).map_err(|e| Error::Config(format!("output: {e}")))?;
        }
        Ok(())
    }
}

fn validate_simulation(s: &SimulationConfig) -> Result<()> {
    if s.intensities.is_empty() || s.intensities.iter().any(|&i| !(i > 0.0 && i.is_finite())) {
        return config_err("simulation.intensities: need at least one positive intensity");
    }
    if s.flat_samples == 0 {
        return config_err("simulation.flat_samples: must be at least 1");
    }
    if s.seeds.is_empty() {
        return config_err("simulation.seeds: list the seeds explicitly");
    }
    let unique: HashSet<_> = s.seeds.iter().collect();
    if unique.len() != s.seeds.len() {
        return config_err("simulation.seeds: duplicate seed");
    }
    let unique: HashSet<_> = s.intensities.iter().map(|i| i.to_bits()).collect();
    if unique.len() != s.intensities.len() {
        return config_err("simulation.intensities: duplicate intensity");
    }
    Ok(())
}

fn validate_phantom(p: &PhantomConfig, g: &GeometryConfig) -> Result<()> {
    match p {
        PhantomConfig::ThreeSquares => {
            if g.domain_side != crate::phantoms::THREE_SQUARES_SIDE {
                return config_err(format!(
                    "phantom three-squares is defined on a {} cm domain, geometry.domain_side is {}",
                    crate::phantoms::THREE_SQUARES_SIDE,
                    g.domain_side
                ));
            }
        }
        PhantomConfig::Grains {
            num_grains,
            value_range,
            mask_radius,
            ..
        } => {
            if *num_grains == 0 {
                return config_err("phantom.num_grains: must be positive");
            }
            if !(value_range[0] >= 0.0 && value_range[1] >= value_range[0]) {
                return config_err("phantom.value_range: need 0 <= low <= high");
            }
            if !(*mask_radius > 0.0) {
                return config_err("phantom.mask_radius: must be positive");
            }
        }
        PhantomConfig::SheppLogan { value_scale, .. } => {
            if !(*value_scale > 0.0) {
                return config_err("phantom.value_scale: must be positive");
            }
        }
    }
    Ok(())
}

fn validate_profile(p: &ProfileConfig) -> Result<()> {
    if !(p.epsilon > 0.0) {
        return config_err("profile.epsilon: must be positive");
    }
    if p.t0.is_empty() {
        return config_err("profile.t0: need at least one value");
    }
    if p.t0.iter().any(|&t| t == 0.0 || !t.is_finite()) {
        return config_err("profile.t0: t0 = 0 is degenerate (no ring); use nonzero offsets");
    }
    if !(p.rho_max > 0.0) || p.samples < 2 {
        return config_err("profile: rho_max must be positive and samples at least 2");
    }
    if !(p.envelope_min > 0.0 && p.envelope_max > p.envelope_min) || p.envelope_points < 2 {
        return config_err("profile: need 0 < envelope_min < envelope_max and envelope_points >= 2");
    }
    Ok(())
}

/// Names of the presets shipped with the crate.
pub const PRESETS: [&str; 6] = ["fig1", "fig2", "table1", "fig5", "fig6", "fig7"];

pub fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig1" => include_str!("../presets/fig1.toml"),
        "fig2" => include_str!("../presets/fig2.toml"),
        "table1" => include_str!("../presets/table1.toml"),
        "fig5" => include_str!("../presets/fig5.toml"),
        "fig6" => include_str!("../presets/fig6.toml"),
        "fig7" => include_str!("../presets/fig7.toml"),
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = preset_text(name)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}; available: {}", PRESETS.join(", "))))?;
    ExperimentConfig::from_toml(text).map_err(|e| Error::Config(format!("preset {name}: {e}")))
}
