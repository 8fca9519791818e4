//! `fuselab`: simulate, softmask, fuse and evaluate lesion masks.
//!
//! Exit codes: 0 success, 1 output write failure, 2 invalid arguments or
//! config, 3 invalid input files, 4 numerical failure during fusion.

mod args;
mod commands;
mod error;
mod output;

use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use args::{Cli, Command};
use error::{CliError, CliResult, EXIT_USAGE};

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::io(format!("cannot serialize output: {e}")))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure {n} threads: {e}")))?;
    }
    let global = &cli.global;
    match cli.command {
        Command::Fuse(a) => print_json(&commands::fuse_cmd(global, a)?),
        Command::Softmask(a) => print_json(&commands::softmask_cmd(global, a)?),
        Command::Simulate(a) => print_json(&commands::simulate_cmd(global, a)?),
        Command::Eval(a) => print_json(&commands::eval_cmd(global, a)?.0),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fuselab: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
