//! The `qenet` command-line tool.

use std::ffi::OsString;

use clap::Parser;
use serde_json::json;

pub mod args;
mod commands;
pub mod config;
pub mod logging;

pub use commands::{CHECKPOINT_DIR_ENV, DATA_ROOT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn run(cli: args::Cli) -> qenet::Result<()> {
    use args::Command::*;
    match &cli.command {
        Prepare(a) => commands::prepare(a),
        Encode(a) => commands::encode(a),
        Train(a) => commands::train(a),
        Enhance(a) => commands::enhance(a),
        Eval(a) => commands::eval(a),
        Report(a) => commands::report(a),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    logging::init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{}", json!({ "event": "failed", "error": e.to_string() }));
            EXIT_RUNTIME
        }
    }
}
