use std::process::ExitCode;

use clap::Parser;

use monodistill_cli::{run, Cli, Diagnostics};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut diag = Diagnostics::default();
    match run(&cli, &mut diag) {
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
        Ok(()) if cli.strict && diag.warnings > 0 => {
            eprintln!("error: {} warning(s) under --strict", diag.warnings);
            ExitCode::FAILURE
        }
        Ok(()) => ExitCode::SUCCESS,
    }
}
