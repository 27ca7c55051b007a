//! Command-line front end for the quench3d simulator.
//!
//! Every command reads one flat key-value config (all keys optional, unknown
//! keys rejected), runs a pipeline from the core crate, and writes
//! machine-readable outputs plus a manifest with content hashes. Exit codes:
//! 0 success, 2 config error, 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::PolarizationArgs;
use config::RunConfig;
use manifest::OutputStage;
use quench3d::model::BlochMomentum;

#[derive(Parser)]
#[command(
    name = "quench3d",
    version,
    about = "Quench dynamics of a 3D chiral topological insulator: \
             band-inversion surfaces, winding numbers, topological charges, \
             dynamical transitions, and photon shot-noise emulation"
)]
struct Cli {
    /// Run configuration file (flat `section.key = value` lines)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides out.dir)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed for noisy paths (overrides noise.seed)
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Shot-noise emulation (overrides noise.enabled)
    #[arg(long, global = true, value_name = "on|off")]
    noise: Option<String>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Polarization time series at one momentum
    Polarization {
        /// Momentum as X,Y,Z in units of pi
        #[arg(long, value_name = "X,Y,Z", allow_hyphen_values = true)]
        k: String,
        /// Window start, units of 1/t_0
        #[arg(long, default_value_t = 0.0, value_name = "T", allow_hyphen_values = true)]
        t_start: f64,
        /// Window end, units of 1/t_0 (default: t_max of the model)
        #[arg(long, value_name = "T", allow_hyphen_values = true)]
        t_end: Option<f64>,
        /// Samples across the window
        #[arg(long, default_value_t = 25, value_name = "N")]
        t_samples: usize,
    },
    /// Reconstruct the band-inversion surface as an OBJ mesh
    Bis,
    /// Dynamical winding number of the spin texture on the surface
    Winding,
    /// Locate and value the topological charges
    Charges,
    /// Critical quench depth of the dynamical transition
    Transition,
    /// Winding numbers across a mass sweep
    PhaseDiagram,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Polarization { .. } => "polarization",
            Command::Bis => "bis",
            Command::Winding => "winding",
            Command::Charges => "charges",
            Command::Transition => "transition",
            Command::PhaseDiagram => "phase-diagram",
        }
    }
}

enum AppError {
    /// Bad flags or config values: exit 2.
    Config(String),
    /// The physics or I/O failed after validation: exit 3.
    Run(quench3d::Error),
}

impl From<quench3d::Error> for AppError {
    fn from(e: quench3d::Error) -> Self {
        AppError::Run(e)
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Run(e.into())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut overrides = Vec::new();
    if let Some(out) = &cli.out {
        overrides.push(("out.dir".to_string(), out.display().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("noise.seed".to_string(), seed.to_string()));
    }
    if let Some(noise) = &cli.noise {
        let value = match noise.as_str() {
            "on" => "true",
            "off" => "false",
            other => {
                return Err(AppError::Config(format!(
                    "--noise: expected on or off, got \"{other}\""
                )))
            }
        };
        overrides.push(("noise.enabled".to_string(), value.to_string()));
    }

    let cfg = config::load(cli.config.as_deref(), &overrides).map_err(|e| AppError::Config(e.0))?;

    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(AppError::Config("--threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AppError::Config(format!("--threads: {e}")))?;
    }

    let pol_args = match &cli.command {
        Command::Polarization { k, t_start, t_end, t_samples } => {
            Some(polarization_args(k, *t_start, *t_end, *t_samples)?)
        }
        _ => None,
    };

    let started = std::time::Instant::now();
    let mut stage = OutputStage::new(&cfg.out_dir)?;
    let headline = dispatch(&cli.command, &cfg, pol_args.as_ref(), &mut stage)?;
    let wall = started.elapsed().as_secs_f64();
    let paths = stage.commit(cli.command.name(), &cfg.echo, cfg.noise.seed, wall)?;

    println!("{headline}");
    println!(
        "wrote {} files to {} in {wall:.2}s",
        paths.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn dispatch(
    cmd: &Command,
    cfg: &RunConfig,
    pol: Option<&PolarizationArgs>,
    stage: &mut OutputStage,
) -> quench3d::Result<String> {
    match cmd {
        Command::Polarization { .. } => {
            commands::polarization(cfg, pol.expect("args parsed before dispatch"), stage)
        }
        Command::Bis => commands::bis(cfg, stage),
        Command::Winding => commands::winding(cfg, stage),
        Command::Charges => commands::charges(cfg, stage),
        Command::Transition => commands::transition(cfg, stage),
        Command::PhaseDiagram => commands::phase_diagram(cfg, stage),
    }
}

fn polarization_args(
    k: &str,
    t_start: f64,
    t_end: Option<f64>,
    t_samples: usize,
) -> Result<PolarizationArgs, AppError> {
    let parts: Vec<&str> = k.split(',').collect();
    if parts.len() != 3 {
        return Err(AppError::Config(format!(
            "--k: expected X,Y,Z in units of pi, got \"{k}\""
        )));
    }
    let mut v = [0.0; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = match part.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => x,
            _ => {
                return Err(AppError::Config(format!(
                    "--k: component \"{}\" is not a finite number",
                    part.trim()
                )))
            }
        };
    }
    if !t_start.is_finite() || t_start < 0.0 {
        return Err(AppError::Config(format!(
            "--t-start: must be finite and non-negative, got {t_start}"
        )));
    }
    if let Some(te) = t_end {
        if !te.is_finite() || te <= t_start {
            return Err(AppError::Config(format!(
                "empty time range [{t_start}, {te}]"
            )));
        }
    }
    if t_samples < 2 {
        return Err(AppError::Config(format!(
            "--t-samples: need at least 2, got {t_samples}"
        )));
    }
    Ok(PolarizationArgs {
        k: BlochMomentum::new(v[0] * PI, v[1] * PI, v[2] * PI),
        t_start,
        t_end,
        t_samples,
    })
}
