//! Command-line entry point wiring the engine into reproducible workflows.
//!
//! Exit codes: 0 success, 1 usage or I/O failure, 2 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Instance segmentation driven by seed maps and pixel embeddings.
#[derive(Parser, Debug)]
#[command(name = "instanseg", version, about)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads (falls back to INSTANSEG_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with exact instance labels.
    Gen(commands::GenArgs),
    /// Train a model, keeping the checkpoint with the best validation score.
    Train(commands::TrainArgs),
    /// Segment one image and write a 16-bit label map.
    Infer(commands::InferArgs),
    /// Score predicted label maps against ground truth.
    Eval(commands::EvalArgs),
    /// Compare analytic gradients against finite differences for every op.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    ExitCode::from(run())
}

fn run() -> u8 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version render on stdout and are not failures.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let result = init_threads(cli.threads)
        .and_then(|()| config::RunConfig::load(cli.config.as_deref()))
        .and_then(|cfg| match cli.command {
            Command::Gen(args) => commands::gen(args, cfg),
            Command::Train(args) => commands::train(args, cfg),
            Command::Infer(args) => commands::infer(args, cfg),
            Command::Eval(args) => commands::eval(args, cfg),
            Command::Gradcheck(args) => commands::gradcheck(args),
        });
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

/// Sizes the global worker pool from --threads or INSTANSEG_THREADS.
fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("INSTANSEG_THREADS") {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| anyhow::anyhow!("INSTANSEG_THREADS must be an integer, got {v:?}"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("worker pool setup failed: {e}"))?;
    }
    Ok(())
}
