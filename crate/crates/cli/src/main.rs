//! `flowpolicy` command-line runner.
//!
//! Exit codes: 0 success, 2 configuration or missing prerequisite,
//! 3 I/O or file format, 4 numerical divergence, 1 anything else.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigError;
use stages::Stage;

#[derive(Parser)]
#[command(name = "flowpolicy", version, about = "Generative-model policies for offline RL")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set policy.beta=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root that relative `output.dir` paths are resolved against.
    #[arg(long, env = "FLOWPOLICY_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or import) the offline dataset.
    MakeData,
    /// Fit the behavior policy by matching.
    Pretrain,
    /// Train the IQL critic.
    TrainCritic,
    /// Advantage-weighted matching from scratch.
    TrainGmpo,
    /// Reverse-KL fine-tuning of the behavior policy.
    TrainGmpg,
    /// Draw actions for dataset states.
    Sample {
        #[arg(long, default_value = "policy")]
        checkpoint: String,
        #[arg(short)]
        n: Option<usize>,
    },
    /// Log-likelihood of dataset actions.
    Logprob {
        #[arg(long, default_value = "behavior")]
        checkpoint: String,
        /// Dataset file to score instead of the run's dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(short)]
        n: Option<usize>,
    },
    /// Summary statistics of generated actions.
    Eval {
        #[arg(long, default_value = "policy")]
        checkpoint: String,
    },
    /// Write generation trajectories as CSV.
    ExportTrajectories {
        #[arg(long, default_value = "policy")]
        checkpoint: String,
        #[arg(short)]
        n: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::Pretrain => "pretrain",
            Command::TrainCritic => "train-critic",
            Command::TrainGmpo => "train-gmpo",
            Command::TrainGmpg => "train-gmpg",
            Command::Sample { .. } => "sample",
            Command::Logprob { .. } => "logprob",
            Command::Eval { .. } => "eval",
            Command::ExportTrajectories { .. } => "export-trajectories",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let path = cli.config.ok_or_else(|| config::config_err("--config is required"))?;
    let cfg = config::load(&path, &cli.overrides)?;
    let out = cfg.output_dir(cli.output_root.as_deref());
    let stage = Stage::start(cfg, out, cli.command.name())?;
    match &cli.command {
        Command::MakeData => stage.make_data(),
        Command::Pretrain => stage.pretrain(),
        Command::TrainCritic => stage.train_critic(),
        Command::TrainGmpo => stage.train_gmpo(),
        Command::TrainGmpg => stage.train_gmpg(),
        Command::Sample { checkpoint, n } => stage.sample(checkpoint, *n),
        Command::Logprob { checkpoint, input, n } => stage.logprob(checkpoint, input.as_deref(), *n),
        Command::Eval { checkpoint } => stage.eval(checkpoint),
        Command::ExportTrajectories { checkpoint, n } => stage.export_trajectories(checkpoint, *n),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<flowpolicy::Error>() {
            return match e {
                e if e.is_numeric() => 4,
                flowpolicy::Error::Io(_) | flowpolicy::Error::Format(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(msg) => {
            println!("{name}: {msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{name}: error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
