//! Pipeline runner behind the `cdpa` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod pipeline;
pub mod prior;

pub use commands::{Cli, Command};
pub use config::Config;
pub use error::{CliError, CliResult};

/// Sizes the global worker pool; returns the thread count in effect.
pub fn init_threads(requested: Option<usize>) -> CliResult<usize> {
    let n = match requested {
        Some(0) => return Err(CliError::config("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    Ok(n)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_CONFIG } else { 0 };
        }
    };
    let outcome = init_threads(cli.threads).and_then(|threads| commands::run(cli, threads));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cdpa: {e}");
            e.exit_code()
        }
    }
}
