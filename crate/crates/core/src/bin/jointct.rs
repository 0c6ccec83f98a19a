use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jointct::config::{preset, preset_text, ExperimentConfig, ProfileConfig, PRESETS};
use jointct::experiment::{self, BatchOutcome};
use jointct::Error;

/// Parallel-beam CT with joint flat-field estimation: simulate data,
/// reconstruct with the configured models and compute reports.
#[derive(Parser, Debug)]
#[command(name = "jointct", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Use a bundled preset instead of a file.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Output root; overrides `output.directory`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run a single noise realization with this seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for independent jobs (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate phantom, flat-fields, flat samples and counts.
    Simulate,
    /// Reconstruct every measurement set with every configured model.
    Reconstruct,
    /// Compute metric tables and report images from reconstructions.
    Analyze,
    /// Ring profiles, extrema and envelope of the apodized filter.
    Profile {
        /// Stripe offsets (repeatable); replaces the configured list.
        #[arg(long, allow_hyphen_values = true)]
        t0: Vec<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Profiles are sampled on [-rho_max, rho_max].
        #[arg(long)]
        rho_max: Option<f64>,
    },
    /// Simulate, reconstruct and analyze (and profile, if configured).
    All,
    /// Print a bundled preset, or list the presets.
    Preset { name: Option<String> },
}

enum Failure {
    Config(String),
    Degenerate(usize),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn load_config(common: &Common, allow_default_profile: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::from_path(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) if allow_default_profile => preset("fig2")?,
        (None, None) => return Err(Failure::Config("give --config PATH or --preset NAME".into())),
    };
    if let Some(seed) = common.seed {
        if cfg.simulation.is_none() {
            return Err(Failure::Config("--seed needs a configuration with a simulation section".into()));
        }
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output.directory = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn check_batch(outcome: &BatchOutcome) -> Result<(), Failure> {
    for f in &outcome.manifest.failures {
        eprintln!("failed: set {} model {}: {}", f.set, f.model, f.error);
    }
    if outcome.other_failures > 0 {
        Err(Failure::Other(format!("{} job(s) failed", outcome.other_failures + outcome.degenerate_failures)))
    } else if outcome.degenerate_failures > 0 {
        Err(Failure::Degenerate(outcome.degenerate_failures))
    } else {
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Preset { name } = &cli.command {
        match name {
            None => PRESETS.iter().for_each(|p| println!("{p}")),
            Some(n) => match preset_text(n) {
                Some(text) => print!("{text}"),
                None => return Err(Failure::Config(format!("unknown preset {n:?}; available: {}", PRESETS.join(", ")))),
            },
        }
        return Ok(());
    }
    let is_profile = matches!(cli.command, Command::Profile { .. });
    let mut cfg = load_config(&cli.common, is_profile)?;
    if let Command::Profile { t0, epsilon, rho_max } = &cli.command {
        let mut p: ProfileConfig = match (&cfg.profile, preset("fig2")?.profile) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d,
            (None, None) => unreachable!("fig2 preset has a profile section"),
        };
        if !t0.is_empty() {
            p.t0 = t0.clone();
        }
        if let Some(e) = epsilon {
            p.epsilon = *e;
        }
        if let Some(r) = rho_max {
            p.rho_max = *r;
        }
        cfg.profile = Some(p);
        cfg.validate()?;
    }
    let root = PathBuf::from(&cfg.output.directory);
    let threads = cli.common.jobs.unwrap_or(0);
    if cli.common.jobs == Some(0) {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Other(format!("cannot start worker pool: {e}")))?;
    pool.install(|| -> Result<(), Failure> {
        match cli.command {
            Command::Simulate => {
                let m = experiment::simulate(&cfg, &root)?;
                eprintln!("simulated {} measurement set(s) into {}", m.sets.len(), root.join(experiment::DATA_DIR).display());
            }
            Command::Reconstruct => {
                let outcome = experiment::reconstruct(&cfg, &root)?;
                eprintln!("reconstructions written to {}", root.join(experiment::RECON_DIR).display());
                check_batch(&outcome)?;
            }
            Command::Analyze => {
                experiment::analyze(&cfg, &root)?;
                eprintln!("reports written to {}", root.join(experiment::ANALYSIS_DIR).display());
            }
            Command::Profile { .. } => {
                experiment::profile(&cfg, &root)?;
                eprintln!("profiles written to {}", root.join(experiment::PROFILE_DIR).display());
            }
            Command::All => {
                let outcome = experiment::run_all(&cfg, &root)?;
                eprintln!("outputs written to {}", root.display());
                if let Some(o) = &outcome {
                    check_batch(o)?;
                }
            }
            Command::Preset { .. } => unreachable!("handled above"),
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Degenerate(n)) => {
            eprintln!("{n} job(s) failed because the model is degenerate for the data; other jobs completed");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
