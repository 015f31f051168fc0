//! `avloc` command-line front end.
//!
//! Exit codes: 0 success, 2 bad flags or configuration, 3 I/O or malformed
//! input files, 4 numeric failure (divergence, non-finite values, failed
//! gradient check).

mod args;
mod commands;
mod config_file;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<avloc::Error> for CliError {
    fn from(e: avloc::Error) -> Self {
        use avloc::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) => CliError::Usage(msg),
            E::NonFinite(_) | E::Diverged { .. } => CliError::Numeric(msg),
            _ => CliError::Io(msg),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Mine(a) => commands::mine_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::AblateK(a) => commands::ablate(a),
        Command::Compare(a) => commands::compare(a),
        Command::ExportMaps(a) => commands::export_maps(a),
        Command::GradCheck(a) => commands::grad_check_cmd(a),
    }
}

fn main() -> ExitCode {
    let argv = match config_file::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.code());
        }
    };
    // clap exits with 2 on usage errors and 0 for --help / --version.
    let cli = Cli::parse_from(argv);
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
