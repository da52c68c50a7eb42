//! Command line and HTTP front ends over one shared request engine.

pub mod commands;
pub mod engine;
pub mod error;
pub mod service;

use clap::Parser;

pub use error::ApiError;

/// Runs the command line and returns the process exit code. Failures are
/// reported on stderr as one JSON object `{error, detail}`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            report(&ApiError::usage(e.render().to_string()));
            return 2;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            if e.error == "usage" {
                2
            } else {
                1
            }
        }
    }
}

fn report(e: &ApiError) {
    eprintln!("{}", serde_json::to_string(e).expect("serializable error"));
}
