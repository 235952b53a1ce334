//! `e2p`: synthesize data, pretrain and freeze the LM, train the projection,
//! evaluate baselines and export artifacts.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "e2p", version, about = "Embedding-to-prefix personalization of a frozen LM")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; relative data/checkpoint/report dirs live below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Override any config key, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population and write train/dev/test splits.
    Synth,
    /// Pretrain the language model on the training split and freeze it.
    Pretrain,
    /// Train the embedding-to-prefix projection against the frozen LM.
    TrainE2p,
    /// Score every configured baseline on the test split.
    Eval,
    /// Paired t-test between two baselines' per-example scores.
    Ttest {
        #[arg(long, default_value = "e2p")]
        a: String,
        #[arg(long, default_value = "no-context")]
        b: String,
        /// Metric name as it appears in report file names; defaults to the
        /// first configured metric.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Write 2-D views of user embeddings and their prefixes as CSV.
    ExportPrefixSpace,
}

/// A failure with a fixed process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const CONTRACT: u8 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Self {
            code: Self::CONTRACT,
            message: message.into(),
        }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use e2p_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => Exit::CONFIG,
                E::Contract(_) | E::FreezeViolation { .. } | E::NonFinite { .. } => Exit::CONTRACT,
                _ => Exit::DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return Exit::DATA;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = config::resolve(g.config.as_deref(), &g.overrides, g.seed, g.out.as_deref())?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, g.force),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::TrainE2p => commands::train_e2p(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ttest { a, b, metric } => commands::ttest(&cfg, &a, &b, metric.as_deref()),
        Command::ExportPrefixSpace => commands::export_prefix_space(&cfg),
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
