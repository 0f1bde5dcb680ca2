use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rulsim::scenario::{self, RunOptions};

/// Random-unitary realization of self-adjoint-channel Lindblad dynamics:
/// closed forms, direct integration and Monte Carlo, cross-validated.
#[derive(Parser)]
#[command(name = "rulsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario described by a config file.
    Run {
        /// Path to the `key = value` config file.
        config: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of Monte Carlo trajectories.
        #[arg(long)]
        traj: Option<usize>,
        /// Override the number of grid steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory for CSV tables and the run manifest.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// List the registered scenarios.
    List,
    /// Execute the invariant battery and write its report.
    Selftest {
        /// Output directory for the selftest CSV and manifest.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Master seed for the stochastic checks.
        #[arg(long, default_value_t = 20020922)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> rulsim::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            traj,
            steps,
            out,
        } => {
            let opts = RunOptions {
                out_dir: Some(out),
                seed,
                trajectories: traj,
                steps,
            };
            let summary = scenario::run_file(&config, &opts)?;
            report(&summary)
        }
        Command::List => {
            print!("{}", scenario::list_scenarios_table());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { out, seed } => {
            let summary = scenario::selftest(&out, seed)?;
            report(&summary)
        }
    }
}

fn report(summary: &scenario::RunSummary) -> rulsim::Result<ExitCode> {
    for check in &summary.checks {
        println!(
            "[{}] {}: {}",
            if check.passed { "pass" } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    for path in &summary.csv_paths {
        println!("wrote {}", path.display());
    }
    println!("wrote {}", summary.manifest_path.display());
    if summary.all_checks_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: {} failed checks", summary.checks.iter().filter(|c| !c.passed).count());
        Ok(ExitCode::from(3))
    }
}
