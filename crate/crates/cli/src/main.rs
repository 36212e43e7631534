use std::process::ExitCode;

use clap::Parser;
use csl_lab::{run, Cli, Invocation};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match Invocation::from_cli(&cli).and_then(|inv| run(&inv)) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("csl-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
