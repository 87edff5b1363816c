use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = fomo::cli::Cli::parse();
    match fomo::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
