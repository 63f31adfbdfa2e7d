//! `facehop`: train, evaluate and use successive-subspace-learning face
//! verifiers from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error
//! (unreadable or malformed files), 4 numeric failure (fitting or training).

mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
        Command::Identify(a) => commands::identify(a),
        Command::Active(a) => commands::active(a),
        Command::Params(a) => commands::params(a),
        Command::Synth(a) => commands::synth(a),
        Command::Features(a) => commands::features(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CliError;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        use facehop_core::Error as E;
        assert_eq!(CliError::from(E::InvalidInput("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(E::Parse { line: 1, message: "x".into() }).exit_code(), 3);
        assert_eq!(CliError::from(E::Checksum { stored: 1, computed: 2 }).exit_code(), 3);
        assert_eq!(CliError::from(E::Fit("x".into())).exit_code(), 4);
        assert_eq!(CliError::from(E::Training("x".into())).exit_code(), 4);
    }
}
