//! Thin command-line entry point; all behavior lives in the library.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 config error,
//! 3 generation failure, 4 training failure, 5 evaluation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wicl::error::Error;
use wicl::experiment::{cmd_eval, cmd_gen_data, cmd_train, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "wicl",
    about = "Desk-scale lab for multi-user precoding and channel prediction with an in-context transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML); defaults fill every omitted field.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: machine parallelism; 1 pins the
    /// bit-reproducibility contract, though any count produces identical
    /// results by construction).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate channel datasets and solver labels (WDS1 files + manifest).
    GenData(CommonArgs),
    /// Train the multi-task model; resumes from an existing checkpoint.
    Train(CommonArgs),
    /// Evaluate a trained checkpoint into report CSVs.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// One of: fig7, fig8, fig9, shots, fig13, all.
        #[arg(long, default_value = "all")]
        experiment: String,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::config(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(cfg)
}

/// Config problems exit with 2 regardless of the command; other failures use
/// the command's own code.
fn run(command: &Command) -> Result<(), (u8, Error)> {
    let code_for = |fallback: u8, e: Error| -> (u8, Error) {
        match e {
            Error::Config(_) => (2, e),
            _ => (fallback, e),
        }
    };
    match command {
        Command::GenData(common) => {
            let cfg = load_config(common).map_err(|e| (2, e))?;
            let manifest = cmd_gen_data(&cfg).map_err(|e| code_for(3, e))?;
            println!("wrote {} dataset files to {:?}", manifest.files.len(), cfg.data_dir());
            Ok(())
        }
        Command::Train(common) => {
            let cfg = load_config(common).map_err(|e| (2, e))?;
            let state = cmd_train(&cfg).map_err(|e| code_for(4, e))?;
            println!(
                "trained to epoch {} ({} steps); checkpoint at {:?}",
                state.epoch,
                state.step,
                cfg.checkpoint_path()
            );
            Ok(())
        }
        Command::Eval { common, experiment } => {
            let cfg = load_config(common).map_err(|e| (2, e))?;
            let written = cmd_eval(&cfg, experiment).map_err(|e| code_for(5, e))?;
            for path in written {
                println!("wrote {path:?}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, err)) => {
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
    }
}
