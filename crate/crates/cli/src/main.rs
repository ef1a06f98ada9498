mod args;
mod commands;
mod config_file;
mod error;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use error::CliError;

fn parse(argv: &[OsString]) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

/// Parses argv, folding in `--config` defaults when one is given.
fn resolve(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let Some((sub, sub_matches)) = matches.subcommand() else {
        return Ok(cli);
    };
    match config_file::merge(&argv, &path, sub, sub_matches) {
        Ok(merged) => parse(&merged),
        Err(e) => Err(Cli::command().error(clap::error::ErrorKind::Io, e.to_string())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Datagen(a) => commands::datagen(a),
        Command::Train(a) => commands::train(a),
        Command::Prune(a) => commands::prune_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench_cmd(a),
        Command::Viz(a) => commands::viz(a),
    }
}

fn main() -> ExitCode {
    let cli = match resolve(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
