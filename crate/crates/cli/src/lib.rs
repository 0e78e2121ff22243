//! Library half of the `bsa` command-line tool, so the commands can be
//! driven from tests without spawning a process.

pub mod args;
pub mod bench;
pub mod commands;
pub mod error;

pub use error::{CliError, CliResult};

use std::io::Write;

use args::{Cli, Command};

/// Runs a parsed command line, writing to the command's `--out` or to
/// `stdout`.
pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::invalid_config("threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::new("threads", e.to_string(), error::EXIT_FAILURE))?;
    }
    let out = |p: &Option<std::path::PathBuf>| commands::output(p.as_deref());
    match &cli.command {
        Command::Check(a) => commands::cmd_check(a, &mut out(&a.out)?),
        Command::Bench(a) => commands::cmd_bench(a, &mut out(&a.out)?).map(drop),
        Command::Flops(a) => commands::cmd_flops(a, &mut out(&a.out)?),
        Command::Train(a) => commands::cmd_train(a, &mut out(&a.out)?).map(drop),
        Command::Ablate(a) => commands::cmd_ablate(a, &mut out(&a.out)?).map(drop),
        Command::Rf(a) => commands::cmd_rf(a, &mut out(&a.out)?).map(drop),
    }
}

/// Flushes and reports an error line; returns the process exit status.
pub fn report(result: CliResult<()>, stderr: &mut dyn Write) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.line());
            e.status
        }
    }
}
