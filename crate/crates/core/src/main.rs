use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedemu::cli::EngineHandle;

/// Federated instrument testbed emulator.
#[derive(Parser)]
#[command(name = "fedemu", version)]
struct Args {
    /// Command script to run; reads commands from stdin when absent.
    script: Option<PathBuf>,
    /// Scenario to load before the first command.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let handle = EngineHandle::spawn(".");
    if let Some(path) = &args.scenario {
        if let Err(e) = handle.exec(&format!("up \"{}\"", path.display())) {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }

    let lines: Box<dyn Iterator<Item = io::Result<String>>> = match &args.script {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => Box::new(text.lines().map(|l| Ok(l.to_string())).collect::<Vec<_>>().into_iter()),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        },
        None => Box::new(io::stdin().lock().lines()),
    };

    let mut stdout = io::stdout().lock();
    for line in lines {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        };
        match handle.exec(&line) {
            Ok(Some(out)) => {
                let _ = writeln!(stdout, "{out}");
            }
            Ok(None) => {}
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    ExitCode::SUCCESS
}
