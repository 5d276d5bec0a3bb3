use std::process::ExitCode;

use clap::Parser;
use rapo_core::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("rapo: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
