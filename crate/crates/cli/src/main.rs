mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::{Cli, Command};
use commands::UsageError;

fn synopsis() -> String {
    Cli::command().render_usage().to_string()
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()?;
    }
    match &cli.command {
        Command::Simulate(a) => commands::simulate_cmd(a),
        Command::Filter(a) => commands::filter_cmd(a),
        Command::Surface(a) => commands::surface_cmd(a),
        Command::Reconstruct(a) => commands::reconstruct_cmd(a),
        Command::Analyze(a) => commands::analyze_cmd(a),
        Command::Convert(a) => commands::convert_cmd(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", synopsis());
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\n{}", synopsis());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
