// SPDX-License-Identifier: MIT OR Apache-2.0

//! `neuronscope` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 runtime error.

mod args;
mod commands;
mod error;
mod run;

use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;
use error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};
use run::{default_manifest_path, Run, RunConfig, RunStatus};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli, argv) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("neuronscope: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn resolve_threads(flag: Option<usize>, config: &RunConfig) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match config.threads()? {
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    Ok(n)
}

fn execute(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    let config = match &cli.run_config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::empty(),
    };
    let threads = resolve_threads(cli.threads, &config)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;

    let path = cli.command.path();
    let mut run = Run::new(&path.join(" "), config.section(path)?);
    let start = Instant::now();
    let result = commands::dispatch(cli.command, &mut run);
    let status = RunStatus {
        exit_code: result.as_ref().map_or_else(CliError::exit_code, |_| EXIT_OK),
        error: result.as_ref().err().map(ToString::to_string),
    };
    let manifest_path = cli
        .manifest
        .unwrap_or_else(|| default_manifest_path(run.manifest_anchor()));
    let manifest = run.into_manifest(argv, threads, start.elapsed().as_secs_f64(), status);
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    if let Err(e) = std::fs::write(&manifest_path, bytes) {
        log::warn!("could not write manifest {}: {e}", manifest_path.display());
    }
    result
}
