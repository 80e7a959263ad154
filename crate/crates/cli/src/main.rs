use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rcmvs::{cmd_bench, cmd_check, cmd_run, CliError, EXIT_CONFIG_ERROR};

#[derive(Parser)]
#[command(name = "rcmvs", about = "RCM-constrained visual servoing simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write log.csv and summary.json.
    Run {
        /// Scenario JSON file.
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for the log and summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit the analytical Jacobians against finite differences.
    Check {
        /// Number of random configurations.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Benchmark the per-cycle HQP solve time.
    Bench {
        /// Number of control cycles (at least 100).
        #[arg(long)]
        cycles: usize,
        /// Scenario JSON file.
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, out } => match cmd_run(&scenario, &out) {
            Ok(artifacts) => {
                let summary = &artifacts.result.summary;
                println!("log:     {}", artifacts.log_path.display());
                println!("summary: {}", artifacts.summary_path.display());
                println!(
                    "completed: {}  max_e_rcm: {:.4} mm  mean_e_rcm: {:.4} mm  mean_solve: {:.1} us",
                    summary.completed,
                    summary.max_e_rcm_mm,
                    summary.mean_e_rcm_mm,
                    summary.mean_solve_us
                );
                if let Some(reason) = &artifacts.result.aborted {
                    eprintln!("aborted: {reason}");
                }
                artifacts.exit_code
            }
            Err(err) => report(err),
        },
        Command::Check { samples, seed } => match cmd_check(samples, seed) {
            Ok(report) => {
                print!("{}", report.render());
                if report.passed() {
                    0
                } else {
                    1
                }
            }
            Err(err) => report(err),
        },
        Command::Bench { cycles, scenario } => match cmd_bench(cycles, &scenario) {
            Ok(report) => {
                print!("{}", report.render());
                0
            }
            Err(err) => report(err),
        },
    };
    ExitCode::from(code as u8)
}

fn report(err: CliError) -> i32 {
    eprintln!("error: {err}");
    match err {
        CliError::Config(_) | CliError::Usage(_) | CliError::Io(_) => EXIT_CONFIG_ERROR,
    }
}
