//! `irlgan`: equivalence checks, training runs and gradient checks.

mod config;
mod gradcheck;
mod output;
mod train;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "irlgan", version, about = "GAN / MaxEnt IRL equivalence toolkit")]
struct Cli {
    /// Root seed; overrides the config file's seed for `train`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Tolerance: all three facts for `verify`, relative error for `gradcheck`.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Randomized sweep of the three equivalence facts, with negative controls.
    Verify(VerifyArgs),
    /// Run one training algorithm from a config file.
    Train(TrainArgs),
    /// Central-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random instances per world and regime.
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    /// World as WxH/T (repeatable); defaults to 2x2/3 and 3x3/5.
    #[arg(long = "world", value_parser = verify::parse_world)]
    worlds: Vec<irlgan_core::GridConfig>,
    /// Demos and generator samples per empirical instance.
    #[arg(long, default_value_t = 200)]
    n_samples: usize,
    /// Offset added to the stationary bias in the fact-2 sweep checks.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    perturb_bias: f64,
    #[arg(long)]
    tol_fact1: Option<f64>,
    #[arg(long)]
    tol_fact2: Option<f64>,
    #[arg(long)]
    tol_fact3: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    GanIrl,
    Gcl,
    MaxentExact,
    EbmGan,
    EbmMl,
}

impl Algorithm {
    fn name(self) -> &'static str {
        match self {
            Algorithm::GanIrl => "gan-irl",
            Algorithm::Gcl => "gcl",
            Algorithm::MaxentExact => "maxent-exact",
            Algorithm::EbmGan => "ebm-gan",
            Algorithm::EbmMl => "ebm-ml",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    algorithm: Algorithm,
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all`, a family name, or `discriminator` / `generator`.
    #[arg(long, default_value = "all")]
    component: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
}

/// Outcome of a command, mapped to the process exit code.
pub enum Outcome {
    Pass,
    Fail,
    Usage(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify(args) => verify::run(&args, cli.seed, cli.out, cli.tol),
        Command::Train(args) => train::run(&args, cli.seed, cli.out),
        Command::Gradcheck(args) => gradcheck::run(&args, cli.seed, cli.out, cli.tol),
    };
    match outcome {
        Outcome::Pass => ExitCode::SUCCESS,
        Outcome::Fail => ExitCode::from(1),
        Outcome::Usage(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
