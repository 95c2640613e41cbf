use std::process::ExitCode;

use clap::Parser;
use voxsel_cli::commands::{run, Cli};
use voxsel_cli::exit_code;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
