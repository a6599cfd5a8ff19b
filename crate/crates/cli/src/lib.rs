//! The `ilq` command line: data collection, training, quantization,
//! evaluation, saliency analysis, kernel benchmarks and the `reproduce`
//! experiment suite.

pub mod args;
pub mod commands;
pub mod experiments;
pub mod output;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;
use ilq_core::Error;

pub use args::Cli;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit status of a run: 0 on success, 1 on a runtime failure, 2 on a
/// usage or configuration error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
