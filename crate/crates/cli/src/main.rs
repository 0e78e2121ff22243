use std::process::ExitCode;

use bsa_cli::args::Cli;
use bsa_cli::error::EXIT_USAGE;
use bsa_cli::CliError;
use clap::error::ErrorKind;
use clap::Parser;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Value errors are configuration errors; keep them on one line.
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            let err = match e.kind() {
                ErrorKind::InvalidValue | ErrorKind::ValueValidation => CliError::invalid_config(first),
                _ => CliError::new("usage", first, EXIT_USAGE),
            };
            eprintln!("{}", err.line());
            return ExitCode::from(err.status as u8);
        }
    };
    let status = bsa_cli::report(bsa_cli::run(&cli), &mut std::io::stderr());
    ExitCode::from(status as u8)
}
