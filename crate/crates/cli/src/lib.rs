//! `kl`: command-line pipeline from trajectory data to a verified invariant set.
//!
//! Exit codes: 0 success, 1 malformed input or other error, 2 verification
//! falsified or inconclusive, 3 no feasible candidate.

pub mod commands;
pub mod config;
pub mod export;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use koopman_lyap::verify::DomainBox;

use commands::{Context, Overrides, Status};
use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "kl", version, about = "Koopman eigenfunction Lyapunov certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Replace the certificate level γ when verifying or exporting.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub degree: Option<u32>,
    #[arg(long = "stable-m")]
    pub stable_m: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample trajectories and write snapshot pairs.
    Simulate(Common),
    /// Fit a Koopman matrix to the snapshots.
    Fit(Common),
    /// Eigendecomposition of the fitted matrix.
    Spectrum(Common),
    /// Select stable eigenfunctions and build the Lyapunov basis.
    Basis(Common),
    /// Run the sampled polytope refinement and pick a candidate.
    Refine(Common),
    /// Maximize the invariance residual over the domain.
    Verify(Common),
    /// Simulate trajectories from inside the certified set.
    #[command(name = "falsify-sim")]
    FalsifySim(Common),
    /// Every stage in order.
    Run(Common),
    /// Grid of (x1, x2, V, residual) for 2-D systems.
    #[command(name = "export-contour")]
    ExportContour {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
        /// Lower corner, comma separated; defaults to the verification domain.
        #[arg(long, requires = "hi", allow_hyphen_values = true)]
        lo: Option<String>,
        #[arg(long, requires = "lo", allow_hyphen_values = true)]
        hi: Option<String>,
    },
    /// V on the plane through three anchor points.
    #[command(name = "export-projection")]
    ExportProjection {
        #[command(flatten)]
        common: Common,
        /// Three points `P0;P1;P2`, coordinates comma separated.
        #[arg(long)]
        anchors: String,
        #[arg(long, default_value_t = 61)]
        resolution: usize,
        #[arg(long, default_value_t = -0.25, allow_hyphen_values = true)]
        span_lo: f64,
        #[arg(long, default_value_t = 1.25, allow_hyphen_values = true)]
        span_hi: f64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::Fit(c)
            | Command::Spectrum(c)
            | Command::Basis(c)
            | Command::Refine(c)
            | Command::Verify(c)
            | Command::FalsifySim(c)
            | Command::Run(c) => c,
            Command::ExportContour { common, .. } | Command::ExportProjection { common, .. } => common,
        }
    }
}

fn parse_point(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad coordinate {t:?}")))
        .collect()
}

fn dispatch(cli: &Cli) -> Result<Status> {
    let c = cli.command.common();
    let ov = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        beta: c.beta,
        gamma: c.gamma,
        max_iter: c.max_iter,
        degree: c.degree,
        stable_m: c.stable_m,
    };
    let ctx = Context::new(PipelineConfig::load(&c.config)?, &ov)?;
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&ctx),
        Command::Fit(_) => commands::fit(&ctx),
        Command::Spectrum(_) => commands::spectrum(&ctx),
        Command::Basis(_) => commands::basis(&ctx),
        Command::Refine(_) => commands::refine(&ctx),
        Command::Verify(_) => commands::verify(&ctx),
        Command::FalsifySim(_) => commands::falsify_sim(&ctx),
        Command::Run(_) => commands::run(&ctx),
        Command::ExportContour { resolution, lo, hi, .. } => {
            let domain = match (lo, hi) {
                (Some(lo), Some(hi)) => Some(DomainBox::new(parse_point(lo)?, parse_point(hi)?)?),
                _ => None,
            };
            commands::export_contour(&ctx, *resolution, domain)
        }
        Command::ExportProjection {
            anchors,
            resolution,
            span_lo,
            span_hi,
            ..
        } => {
            let pts = anchors.split(';').map(parse_point).collect::<Result<Vec<_>>>()?;
            let Ok(pts) = <[Vec<f64>; 3]>::try_from(pts) else {
                bail!("--anchors needs exactly three points separated by ';'");
            };
            commands::export_projection(&ctx, &pts, (*span_lo, *span_hi), *resolution)
        }
    }
}

/// Exit code for an error: 3 when no candidate can exist, 1 otherwise.
pub fn error_code(err: &anyhow::Error) -> u8 {
    use koopman_lyap::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::NoStableEigenpairs | Error::EmptyPolytope) => 3,
        _ => 1,
    }
}

pub fn status_code(s: Status) -> u8 {
    match s {
        Status::Success => 0,
        Status::NotVerified => 2,
        Status::Infeasible => 3,
    }
}

/// Caps the worker pool at `KL_THREADS` when set.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("KL_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("KL_THREADS={v:?} is not a positive integer"))?;
    if n == 0 {
        bail!("KL_THREADS must be at least 1");
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = init_threads().and_then(|()| dispatch(&cli));
    let code = match result {
        Ok(s) => status_code(s),
        Err(e) => {
            eprintln!("error: {e:#}");
            error_code(&e)
        }
    };
    ExitCode::from(code)
}
