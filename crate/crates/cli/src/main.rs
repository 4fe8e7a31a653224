//! `unlearn-guard` command line.
//!
//! Exit codes: 0 ok, 2 config error, 3 pipeline error, 4 bound check failed,
//! 5 neighbor map infeasible.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{Provenance, Writer};

#[derive(Parser)]
#[command(name = "unlearn-guard", version, about = "Filter unnecessary unlearning requests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV.
    Synth(Common),
    /// Train the original model for each scenario's training portion.
    Train(Common),
    /// Split each scenario's requests into unnecessary and necessary.
    Filter(Common),
    /// Score tables and thresholds for the three baseline methods.
    Baselines(Common),
    /// Unlearning cost with and without filtering on a sharded ensemble.
    Sisa(Common),
    /// Check the privacy bound chain on the filtered requests.
    Bound(BoundArgs),
    /// Accuracy and membership-inference comparison of the kept and retrained models.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `model.init_seed` and `model.train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    common: Common,
    /// Test hook: corrupt the kept model and check it with zeroed constants.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("UG_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("UG_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn setup(common: &Common, command: &'static str) -> Result<Ctx, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.model.init_seed = seed;
        cfg.model.train.seed = seed;
    }
    cfg.validate()?;
    let provenance = Provenance {
        command,
        config_hash: cfg.hash(),
        seed: cfg.model.init_seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    let out = Writer::new(&cfg.output_dir, provenance)?;
    Ctx::new(cfg, out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Synth(c) => commands::synth(&mut setup(&c, "synth")?),
        Command::Train(c) => commands::train(&mut setup(&c, "train")?),
        Command::Filter(c) => commands::filter(&mut setup(&c, "filter")?),
        Command::Baselines(c) => commands::baselines(&mut setup(&c, "baselines")?),
        Command::Sisa(c) => commands::sisa(&mut setup(&c, "sisa")?),
        Command::Bound(b) => commands::bound(&mut setup(&b.common, "bound")?, b.inject_fault),
        Command::Report(c) => commands::report(&mut setup(&c, "report")?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
