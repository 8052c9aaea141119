mod args;
mod artifacts;
mod commands;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::Cli;
use crate::error::CliError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(CliError::Usage(String::new()).exit_code()),
            };
        }
    };
    log::debug!("running {} into {}", cli.command.name(), cli.out.display());
    match commands::execute(&cli.command, &cli.out) {
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("cpodrift {}: {err}", cli.command.name());
            ExitCode::from(err.exit_code())
        }
    }
}
