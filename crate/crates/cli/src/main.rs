mod args;
mod commands;
mod error;
mod inputs;

use std::io;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = io::stdout().lock();
    if let Command::Report(args) = &cli.command {
        return commands::report(args, cli.common.out.as_deref(), &mut stdout);
    }
    let cfg = commands::load_config(&cli.common)?;
    match &cli.command {
        Command::Space => commands::space(&cfg, &mut stdout),
        Command::Align(args) => commands::align(&cfg, args, &mut stdout),
        Command::Search => commands::search(&cfg, &mut stdout),
        Command::Grid => commands::grid(&cfg, &mut stdout),
        Command::Report(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FAPS_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 on usage errors and 0 for --help/--version
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("faps: {e}");
            e.exit_code()
        }
    }
}
