mod cli;
mod commands;
mod config;
mod datasets;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command};

fn main() -> ExitCode {
    let parsed = Cli::parse();
    let result = match &parsed.command {
        Command::Train(args) => commands::cmd_train(args),
        Command::Ablate(args) => commands::cmd_ablate(args),
        Command::ExportKernel(args) => commands::cmd_export_kernel(args),
        Command::Saliency(args) => commands::cmd_saliency(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
