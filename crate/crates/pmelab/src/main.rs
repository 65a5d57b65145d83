use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pmelab::{calibrate_command, run_config_file, verify_command, CliError, CALIBRATION_FILE};

/// Porous medium equation laboratory.
#[derive(Debug, Parser)]
#[command(name = "pmelab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the task described by an INI configuration file.
    Run { config: PathBuf },
    /// Run a bundled verification suite and print one JSON line per instance.
    Verify {
        #[arg(long, default_value = "full")]
        suite: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write the JSON lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the universal decay constant and store it in the sidecar.
    Calibrate {
        #[arg(long)]
        m: f64,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value = CALIBRATION_FILE)]
        sidecar: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => {
            let outcome = run_config_file(&config)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome).expect("outcome serializes")
            );
            if outcome.passed {
                Ok(())
            } else {
                Err(CliError::Check(format!(
                    "task '{}' did not pass its checks",
                    outcome.task
                )))
            }
        }
        Command::Verify { suite, seed, out } => {
            let (jsonl, ok, summary) = verify_command(&suite, seed)?;
            if let Some(path) = out {
                std::fs::write(&path, &jsonl)
                    .map_err(|e| CliError::Solver(format!("io: {}: {e}", path.display())))?;
            }
            std::io::stdout()
                .write_all(jsonl.as_bytes())
                .map_err(|e| CliError::Solver(format!("io: stdout: {e}")))?;
            eprintln!("{summary}");
            if ok {
                Ok(())
            } else {
                Err(CliError::Check(format!(
                    "suite '{suite}' has unexpected verdicts"
                )))
            }
        }
        Command::Calibrate { m, dim, sidecar } => {
            let entry = calibrate_command(m, dim, &sidecar)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&entry).expect("entry serializes")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pmelab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
