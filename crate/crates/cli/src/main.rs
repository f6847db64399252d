use clap::Parser;
use std::io::IsTerminal;
use std::process::ExitCode;
use tracing_subscriber::EnvFilter;
use ugsim_cli::{execute, Cli, Outcome};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match execute(Cli::parse()) {
        Ok(Outcome::Ran {
            dir,
            transcripts,
            executed_games,
            resumed_cells,
        }) => {
            println!(
                "{transcripts} transcripts in {} ({executed_games} games run, {resumed_cells} cells resumed)",
                dir.display()
            );
            ExitCode::SUCCESS
        }
        Ok(Outcome::Analyzed { files, .. }) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Ok(Outcome::Regressed(_)) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
