//! `mofusion` binary entry point.

use clap::Parser;
use mofusion::cli::{exit_code_for, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code_for(&e));
    }
}
