use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gprompt::{commands, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "gprompt", version, about = "Instance-aware graph prompt tuning")]
struct Cli {
    /// Flat key = value (or JSON) config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph-classification dataset.
    Synth(Overrides),
    /// Pretrain a backbone by edge prediction.
    Pretrain(Overrides),
    /// Train a task model on top of a frozen (or fine-tuned) backbone.
    Tune(Overrides),
    /// Score a task model checkpoint on part of a dataset.
    Eval(Overrides),
    /// Write a task model's codebook as CSV.
    ExportCodebook(Overrides),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags) = match &cli.command {
        Command::Synth(o) => ("synth", o),
        Command::Pretrain(o) => ("pretrain", o),
        Command::Tune(o) => ("tune", o),
        Command::Eval(o) => ("eval", o),
        Command::ExportCodebook(o) => ("export-codebook", o),
    };
    let result = RunConfig::resolve(name, cli.config.as_deref(), flags).and_then(|rc| commands::run(&rc));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
