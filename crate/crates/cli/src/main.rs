//! `convleak` command-line driver.
//!
//! Every subcommand reads the same `key = value` configuration and works
//! only from files in the output directory, so stages can be rerun in any
//! order once their inputs exist.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use convleak::Error;

use config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "convleak", version, about = "Power side-channel input recovery on a simulated line-buffer CNN accelerator")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; may be repeated.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate traces, ground-truth powers and schedules for a range of images.
    Simulate,
    /// Recover per-cycle powers from trace files (all manifest traces by default).
    Extract { traces: Vec<PathBuf> },
    /// Background detection on every simulated image.
    AttackBg,
    /// Profile images into a power template.
    BuildTemplate,
    /// Template matching and image reconstruction on every simulated image.
    AttackTemplate,
    /// Score recovered images against the golden images and labels.
    Eval,
    /// Print the effective configuration.
    Config,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NOT_APPLICABLE: u8 = 4;

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::NoDrop | Error::TemplateBuild(_)) => EXIT_NOT_APPLICABLE,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::load(cli.config.as_deref(), env_seed.as_deref(), &cli.set)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Extract { traces } => commands::extract(&cfg, &traces).map(|_| ()),
        Command::AttackBg => commands::attack_bg(&cfg),
        Command::BuildTemplate => commands::build_template_cmd(&cfg),
        Command::AttackTemplate => commands::attack_template(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Config => commands::show_config(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
