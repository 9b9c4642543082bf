//! `hybridopt`: reproducible PSF, DOE-optimization, rendering and restoration experiments.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<hybrid_optics::Error> for CliError {
    fn from(e: hybrid_optics::Error) -> Self {
        use hybrid_optics::Error as E;
        match e {
            E::Io(e) => CliError::Io(e),
            E::NotNormalized(_)
            | E::NonFinite(_)
            | E::Diverged { .. }
            | E::EmptyBundle
            | E::DegenerateLanding
            | E::EnergyDropped { .. }
            | E::SagUndefined(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hybridopt",
    version,
    about = "Off-aperture DOE simulation and optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated DOE positions for sweep-position.
    #[arg(long, global = true, value_delimiter = ',')]
    s_list: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    angles_deg: Option<Vec<f64>>,
    /// Comma-separated object distances; `inf` for a source at infinity.
    #[arg(long, global = true, value_delimiter = ',')]
    depths_m: Option<Vec<f64>>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    snr: Option<f64>,
    #[arg(long, global = true)]
    iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// PSF stack, log-scaled previews and per-PSF metrics.
    SimulatePsf,
    /// Optimize DOE heights; writes the loss trace and the quantized DOE.
    OptimizeDoe,
    /// Optimize at each DOE position under the same budget and seed.
    SweepPosition,
    /// Shift-variant, occlusion-aware rendering of an RGBD frame.
    RenderScene,
    /// Patchwise Wiener restoration, with PSNR against an optional reference.
    Deconvolve,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SimulatePsf => "simulate-psf",
            Command::OptimizeDoe => "optimize-doe",
            Command::SweepPosition => "sweep-position",
            Command::RenderScene => "render-scene",
            Command::Deconvolve => "deconvolve",
        }
    }
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    config_file: &'a str,
    seed: u64,
    versions: Versions,
    outputs: Vec<OutputEntry>,
}

#[derive(Serialize)]
struct Versions {
    hybridopt: &'static str,
    manifest_format: u32,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn apply_overrides(cfg: &mut ExperimentConfig, cli: &Cli) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = &cli.s_list {
        cfg.sweep.s_list = v.clone();
    }
    if let Some(v) = &cli.angles_deg {
        cfg.field.angles_deg = v.clone();
    }
    if let Some(v) = &cli.depths_m {
        cfg.field.depths_m = v.clone();
    }
    if let Some(v) = cli.snr {
        cfg.deconvolve.snr = v;
    }
    if let Some(v) = cli.iters {
        cfg.optimize.iterations = v;
    }
}

const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    apply_overrides(&mut cfg, cli);
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    std::fs::create_dir_all(&out)?;

    let resolved = cfg.to_toml()?;
    std::fs::write(out.join(RESOLVED_CONFIG), &resolved)?;
    let mut files = match cli.command {
        Command::SimulatePsf => commands::simulate_psf(&cfg, &out)?,
        Command::OptimizeDoe => commands::optimize_doe(&cfg, &out)?,
        Command::SweepPosition => commands::sweep_position(&cfg, &out)?,
        Command::RenderScene => commands::render_scene(&cfg, &out)?,
        Command::Deconvolve => commands::deconvolve(&cfg, &out)?,
    };
    files.insert(0, RESOLVED_CONFIG.into());
    let outputs = files
        .iter()
        .map(|f| {
            Ok(OutputEntry {
                file: f.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&std::fs::read(out.join(f))?),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = Manifest {
        command: cli.command.name(),
        config_sha256: sha256_hex(resolved.as_bytes()),
        config_file: RESOLVED_CONFIG,
        seed: cfg.seed,
        versions: Versions {
            hybridopt: env!("CARGO_PKG_VERSION"),
            manifest_format: 1,
        },
        outputs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(out.join("manifest.json"), json + "\n")?;
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            log::info!("outputs in {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hybridopt {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
