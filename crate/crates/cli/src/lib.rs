//! Command line front end: train, eval, sweep, search, bench and report.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use commands::Outcome;
pub use config::{Overrides, RunConfig, OUT_DIR_ENV};
pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "lambda-maml", version, about = "MAML with per-layer adaptation patterns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train a model and save the best checkpoint.
    Train(Overrides),
    /// Evaluate a checkpoint on test episodes.
    Eval(Overrides),
    /// Accuracy and time of every pattern at every step count.
    Sweep(Overrides),
    /// Fastest pattern within the accuracy threshold.
    Search(Overrides),
    /// Time adaptation only.
    Bench(Overrides),
    /// Rebuild report files from sweep records.
    Report(Overrides),
}

type CommandFn = fn(&RunConfig) -> CliResult<Outcome>;

/// Parses `argv` (program name first) and runs the command.
pub fn execute<I, S>(argv: I) -> CliResult<Outcome>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError {
        code: if e.use_stderr() { error::EXIT_USAGE } else { 0 },
        message: e.render().to_string(),
    })?;
    let (name, o, f): (&str, &Overrides, CommandFn) = match &cli.command {
        Command::Train(o) => ("train", o, commands::train_cmd),
        Command::Eval(o) => ("eval", o, commands::eval_cmd),
        Command::Sweep(o) => ("sweep", o, commands::sweep_cmd),
        Command::Search(o) => ("search", o, commands::search_cmd),
        Command::Bench(o) => ("bench", o, commands::bench_cmd),
        Command::Report(o) => ("report", o, commands::report_cmd),
    };
    let cfg = config::resolve(name, o)?;
    f(&cfg)
}

/// Runs a command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match execute(argv) {
        Ok(out) => {
            println!("{}", out.summary);
            0
        }
        // help and version
        Err(e) if e.code == 0 => {
            print!("{}", e.message);
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message.trim_start_matches("error: ").trim_end());
            e.code
        }
    }
}
