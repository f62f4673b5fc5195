//! `sirmoment`: simulate, integrate, emulate and fit the spatial SIR model
//! from a JSON run configuration.

/// `println!` that ignores a closed stdout (e.g. when piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "sirmoment",
    version,
    about = "Spatial SIR moment-closure emulation and inference"
)]
struct Cli {
    /// JSON run configuration. Flags override its fields.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: `paths.output`, else `out`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "SIRMOMENT_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the jump process once and optionally sample noisy case reports.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        obs_seed: Option<u64>,
    },
    /// Integrate the moment-closure equations at one parameter point.
    Moments(PointArgs),
    /// Write the Latin hypercube design.
    Design {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Build mean and covariance emulators over the design.
    BuildEmulator {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cv_folds: Option<usize>,
    },
    /// Emulated mean and covariance at one parameter point.
    Predict {
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Sample the posterior for observed case counts.
    Fit(FitArgs),
    /// Per-site discrepancy and trace tables from a fit directory.
    Diagnose {
        #[arg(long)]
        fit_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PointArgs {
    /// Comma-separated design coordinates.
    #[arg(long, value_delimiter = ',')]
    coords: Option<Vec<f64>>,
    #[arg(long)]
    s0: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Observation CSV (`site,time,value`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_s0: Option<usize>,
    /// Fit the mean curves only (no covariance term).
    #[arg(long)]
    mean_only: bool,
    /// Also sample the outbreak source.
    #[arg(long)]
    s0_update: bool,
}

fn apply_point(cfg: &mut RunConfig, p: &PointArgs) -> CliResult<()> {
    if p.coords.is_none() && p.s0.is_none() {
        return Ok(());
    }
    let theta = match (&mut cfg.theta, &p.coords, p.s0) {
        (Some(t), _, _) => t,
        (None, Some(c), Some(s0)) => cfg.theta.insert(config::ThetaSection { coords: c.clone(), s0 }),
        _ => {
            return Err(CliError::Config(
                "--coords and --s0 are both needed without a `theta` section".into(),
            ))
        }
    };
    if let Some(c) = &p.coords {
        theta.coords = c.clone();
    }
    if let Some(s0) = p.s0 {
        theta.s0 = s0;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.output = Some(out.clone());
    }
    match cli.command {
        Command::Simulate { seed, obs_seed } => {
            let sim = cfg.simulation.get_or_insert(config::SimulationSection {
                seed: 0,
                observation: None,
            });
            if let Some(s) = seed {
                sim.seed = s;
            }
            if let Some(s) = obs_seed {
                sim.observation
                    .as_mut()
                    .ok_or_else(|| CliError::Config("--obs-seed needs a `simulation.observation` section".into()))?
                    .seed = Some(s);
            }
            commands::simulate(&cfg)
        }
        Command::Moments(p) => {
            apply_point(&mut cfg, &p)?;
            commands::moments(&cfg)
        }
        Command::Design { seed, k } => {
            let d = cfg
                .design
                .as_mut()
                .ok_or_else(|| CliError::Config("config has no `design` section".into()))?;
            d.seed = seed.unwrap_or(d.seed);
            d.k = k.unwrap_or(d.k);
            commands::design(&cfg)
        }
        Command::BuildEmulator { seed, cv_folds } => {
            if let Some(d) = cfg.design.as_mut() {
                d.seed = seed.unwrap_or(d.seed);
            }
            if let (Some(e), Some(f)) = (cfg.emulator.as_mut(), cv_folds) {
                e.cv_folds = Some(f);
            }
            commands::build_emulator(&mut cfg)
        }
        Command::Predict { artifact, point } => {
            apply_point(&mut cfg, &point)?;
            if artifact.is_some() {
                cfg.paths.artifact = artifact;
            }
            commands::predict(&cfg)
        }
        Command::Fit(a) => {
            if a.artifact.is_some() {
                cfg.paths.artifact = a.artifact;
            }
            if a.data.is_some() {
                cfg.paths.observations = a.data;
            }
            let m = &mut cfg.fit.mcmc;
            m.iters = a.iters.unwrap_or(m.iters);
            m.burn_in = a.burn_in.unwrap_or(m.burn_in);
            m.thin = a.thin.unwrap_or(m.thin);
            m.chains = a.chains.unwrap_or(m.chains);
            m.seed = a.seed.unwrap_or(m.seed);
            m.init_s0 = a.init_s0.or(m.init_s0);
            m.s0_update |= a.s0_update;
            cfg.fit.model.mean_only |= a.mean_only;
            commands::fit(&cfg)
        }
        Command::Diagnose { fit_dir } => {
            if fit_dir.is_some() {
                cfg.paths.fit_dir = fit_dir;
            }
            commands::diagnose(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sirmoment: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
