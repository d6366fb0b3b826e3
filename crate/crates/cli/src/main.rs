mod args;
mod commands;
mod error;
mod host;

use clap::Parser;
use std::process::ExitCode;

use args::{Cli, Command};
use error::{CliError, CliResult};

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Info(a) => commands::info(a),
        Command::Transform(a) => commands::transform(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Run(a) => commands::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Estimate(a) => commands::estimate_cmd(a),
        Command::Selftest(a) => commands::selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::SelfTest) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
