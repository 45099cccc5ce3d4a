use std::process::ExitCode;

use clap::Parser;
use dd_core::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dd {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
