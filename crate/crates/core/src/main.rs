use std::process::ExitCode;

use clap::Parser;
use signlesion::cli::{run, Cli};
use signlesion::ErrorClass;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, code) = match e.class() {
                ErrorClass::Config => ("config", 2),
                ErrorClass::Data => ("data", 3),
                ErrorClass::Precondition => ("precondition", 4),
            };
            eprintln!("error class={class} code={code} message={:?}", e.to_string());
            ExitCode::from(code)
        }
    }
}
