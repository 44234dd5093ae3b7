//! `parattack` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! The worker thread count follows `RAYON_NUM_THREADS`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// An error caused by the invocation rather than by the work itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "parattack",
    version,
    about = "Universal noise attacks and defenses for pedestrian attribute models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(GenDataArgs),
    /// Train a victim model on the train split.
    Train(TrainArgs),
    /// Train a universal noise tensor against a frozen model.
    Attack(AttackArgs),
    /// Train an input filter and prompt offsets against a noise tensor.
    Defend(DefendArgs),
    /// Score a model, optionally under noise and a defense.
    Eval(EvalArgs),
    /// Render a noise tensor as a binary PPM image.
    ExportNoise(ExportArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory or train manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Global,
    Patch,
}

#[derive(Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// L∞ budget, as a fraction such as `10/255` or a decimal.
    #[arg(long, value_parser = config::parse_epsilon)]
    pub epsilon: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Drop the global-local similarity term.
    #[arg(long)]
    pub no_semantic: bool,
    /// Ascend the true-label loss instead of descending towards perturbed labels.
    #[arg(long)]
    pub no_label_perturb: bool,
    /// Skip the per-step clip to the L∞ budget.
    #[arg(long)]
    pub no_linf: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct DefendArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub noise: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train only the input filter.
    #[arg(long)]
    pub filter_only: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long)]
    pub defense: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub extended: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub noise: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub amplification: f32,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>()
        || matches!(
            err.downcast_ref::<parattack::Error>(),
            Some(parattack::Error::Config(_))
        )
    {
        2
    } else {
        1
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Attack(a) => commands::attack(a),
        Command::Defend(a) => commands::defend(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportNoise(a) => commands::export_noise(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
