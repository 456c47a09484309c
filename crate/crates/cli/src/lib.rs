//! Experiment driver: dataset adapters, configuration resolution and the
//! subcommands behind the `resyn` binary.

pub mod adapters;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod models;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{FlagOverrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "resyn",
    version,
    about = "Anomaly and adversarial-input detection for semantic segmentation"
)]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory; every stage writes below it.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run all per-sample work sequentially.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build label-swapped training pairs from the train split.
    GenSynthetic,
    /// Train the discrepancy network on the generated pairs.
    TrainDiscrepancy,
    /// Write per-pixel anomaly scores for the test split.
    Score {
        /// discrepancy, rbm, dropout or ensemble.
        #[arg(long, value_name = "NAME", default_value = "discrepancy")]
        method: String,
    },
    /// ROC curves and AUROC for scored methods.
    Eval {
        /// Comma-separated methods; defaults to every scored method.
        #[arg(long, value_name = "NAME", value_delimiter = ',')]
        method: Vec<String>,
    },
    /// DAG attacks on the configured split.
    Attack {
        /// shift or pure; defaults to the configured target kind.
        #[arg(long, value_name = "NAME")]
        method: Option<String>,
    },
    /// Fit and evaluate the HOG-distance attack detector.
    DetectAttack {
        /// shift or pure; defaults to the configured target kind.
        #[arg(long, value_name = "NAME")]
        method: Option<String>,
    },
    /// Procedural toy dataset.
    Toyworld {
        #[command(subcommand)]
        action: ToyworldAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum ToyworldAction {
    /// Write train and test splits in the generic layout.
    Gen,
}

/// Parse `args`, resolve the configuration against `env` and run the
/// command. Returns the stage manifest path.
pub fn run<I, T>(args: I, env: &[(String, String)]) -> anyhow::Result<Option<PathBuf>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version output; a closed pipe is not an error
            let _ = e.print();
            return Ok(None);
        }
        Err(e) => return Err(CliError::Config(e.render().to_string().trim_end().to_string()).into()),
    };
    let flags = FlagOverrides {
        seed: cli.seed,
        out: cli.out.clone(),
        deterministic: cli.deterministic,
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), env, &flags)?;
    resyn_core::par::set_sequential(cfg.deterministic);
    let manifest = match &cli.command {
        Command::GenSynthetic => commands::gen_synthetic(&cfg)?,
        Command::TrainDiscrepancy => commands::train_discrepancy(&cfg)?,
        Command::Score { method } => commands::score(&cfg, method)?,
        Command::Eval { method } => commands::eval(&cfg, method)?,
        Command::Attack { method } => commands::attack(&cfg, method.as_deref())?,
        Command::DetectAttack { method } => commands::detect_attack(&cfg, method.as_deref())?,
        Command::Toyworld {
            action: ToyworldAction::Gen,
        } => commands::toyworld_gen(&cfg)?,
    };
    Ok(Some(manifest))
}
