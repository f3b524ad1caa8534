mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "latentdyn", version, about = "Identifiable latent dynamics experiments")]
struct Cli {
    /// TOML run configuration; every key is optional except the seed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for data generation and ablations.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Builds a world and writes train/val/test splits plus its checkpoint.
    GenData,
    /// Trains a model on a gen-data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training state to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores a model, or the ground-truth world, on a dataset.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        /// World checkpoint to evaluate as an oracle forecaster.
        #[arg(long, conflicts_with = "model")]
        oracle: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapts a trained model to target data.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Samples future trajectories from a trained model.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Checks the sufficient variability condition of a world.
    Diagnose {
        /// World checkpoint; the configured world is built when omitted.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Trains and scores the ablation variants on shared data.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    let out = &cli.out;
    let dir = match &cli.command {
        Command::GenData => commands::gen_data(&cfg, out)?,
        Command::Train { data, resume } => commands::train_cmd(&cfg, data, resume.as_deref(), out)?,
        Command::Eval { model, oracle, data } => {
            commands::eval_cmd(&cfg, model.as_deref(), oracle.as_deref(), data, out)?
        }
        Command::Adapt { model, data } => commands::adapt_cmd(&cfg, model, data, out)?,
        Command::Rollout { model, data } => commands::rollout_cmd(&cfg, model, data, out)?,
        Command::Diagnose { world } => {
            let (dir, passed) = commands::diagnose_cmd(&cfg, world.as_deref(), out)?;
            println!("sufficient variability: {}", if passed { "PASS" } else { "FAIL" });
            dir
        }
        Command::Ablate { data } => commands::ablate_cmd(&cfg, data, out)?,
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("latentdyn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
