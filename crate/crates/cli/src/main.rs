use std::path::PathBuf;
use std::process::ExitCode;

use adaflow_core::{Error, Mode};
use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "adaflow",
    version,
    about = "Future frame prediction with an online-adapted ensemble"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the prediction network offline and write `theta_p.dcp`.
    Pretrain(RunArgs),
    /// Score a pre-trained network and the repeat baseline on test triplets.
    Eval(RunArgs),
    /// Run the online ensemble over a stream, updating as it goes.
    Stream(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory holding `theta_p.dcp`, or a full ensemble checkpoint for `stream`.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Params { .. } => 2,
        Error::Divergence(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Pretrain(a) => (Mode::Pretrain, a),
        Command::Eval(a) => (Mode::Eval, a),
        Command::Stream(a) => (Mode::Stream, a),
    };
    match commands::run(mode, &args.config, args.checkpoint_dir.as_deref(), args.out.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
