use std::process::ExitCode;

use clap::Parser;

use comfield::cli::{self, Cli};

fn main() -> ExitCode {
    match cli::run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("comfield: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
