mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(CliError::Data(msg)) => {
            eprintln!("tinker: {}", msg);
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("tinker: {}", msg);
            ExitCode::from(2)
        }
    }
}
