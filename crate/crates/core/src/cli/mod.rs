//! Command-line front end. Every command writes into one run directory with
//! `fits/`, `effects/`, `bootstrap/` and `logs/` and a `manifest.json` of
//! SHA-256 digests; artifacts depend only on the config and seed.

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{execute, write_manifest, Manifest, ManifestEntry};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "selcf", version, about = "Control-function estimation for sample-selection models with censored selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print an example configuration with every section and exit.
    #[arg(long)]
    pub print_defaults: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit the control function, the second stage and the configured effects.
    Estimate,
    /// Estimate, then run the weighted bootstrap.
    Bootstrap,
    /// Two-group counterfactual decomposition of quantiles.
    Decompose,
    /// Write a simulated dataset, or run a Monte Carlo study.
    Simulate,
    /// Compare estimates on simulated data with their closed-form targets.
    OracleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Bootstrap => "bootstrap",
            Command::Decompose => "decompose",
            Command::Simulate => "simulate",
            Command::OracleCheck => "oracle-check",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.print_defaults {
        match commands::defaults_text() {
            Ok(t) => {
                print!("{t}");
                return 0;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        }
    }
    let Some(command) = cli.command else {
        eprintln!("error: no command given (try --help)");
        return 2;
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be positive");
            return 2;
        }
        // Only fails if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        },
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match execute(command, &cfg) {
        Ok(dir) => {
            eprintln!("{}: wrote {}", command.name(), dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
