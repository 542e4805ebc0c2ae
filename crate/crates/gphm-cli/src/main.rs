//! GP-HM command line: `solve` runs one configured problem, `benchmark` runs
//! a suite, `verify` runs oracle-backed property checks.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration error.

use clap::{Parser, Subcommand};
use gphm_cli::{bench, config::RunConfig, runner, verify};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gphm",
    about = "Gaussian-process solver for high-frequency and multi-scale PDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem from a config file and write result artifacts.
    Solve {
        /// Path to a flat key=value config with a [run] section.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a benchmark suite and write a consolidated table.
    Benchmark {
        /// Suite name: `desk` (minutes) or `paper` (hours, full settings).
        #[arg(long)]
        suite: String,
        /// Output directory for the table and per-row artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite against its independent oracle.
    Verify {
        /// One of: gradcheck, spectrum, kron, manufactured.
        #[arg(long)]
        kind: String,
    },
}

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = runner::thread_cap_from_env() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_CONFIG_ERROR);
    }
    match cli.command {
        Command::Solve { config } => cmd_solve(&config),
        Command::Benchmark { suite, out } => cmd_benchmark(&suite, &out),
        Command::Verify { kind } => cmd_verify(&kind),
    }
}

fn cmd_solve(path: &PathBuf) -> ExitCode {
    let cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG_ERROR);
        }
    };
    let mut on_trace = |row: &gphm::optim::TraceRow| {
        eprintln!(
            "iter {:>8}  loss {:>14.6}  boundary_mse {:>10.3e}  residual_mse {:>10.3e}  {:>8.1}s",
            row.iteration, row.loss, row.boundary_mse, row.residual_mse, row.wall_seconds
        );
    };
    match runner::solve_to_dir(&cfg, &mut on_trace) {
        Ok(artifacts) => {
            let s = &artifacts.summary;
            println!(
                "problem {} kernel {}: rel_l2_ongrid {:.6e}{} after {} iterations ({:.1}s)",
                s.problem,
                s.kernel,
                s.rel_l2_ongrid,
                s.rel_l2_offgrid
                    .map(|v| format!(", rel_l2_offgrid {v:.6e}"))
                    .unwrap_or_default(),
                s.iterations_run,
                s.wall_seconds
            );
            println!("artifacts in {}", cfg.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}

fn cmd_benchmark(suite: &str, out: &PathBuf) -> ExitCode {
    let rows = match suite {
        "desk" => bench::desk_rows(),
        "paper" => {
            eprintln!(
                "note: the paper suite runs the reference problems at full settings; \
                 expect hours per row"
            );
            bench::paper_rows()
        }
        other => {
            eprintln!("error: unknown suite `{other}` (expected desk or paper)");
            return ExitCode::from(EXIT_CONFIG_ERROR);
        }
    };
    match bench::run_suite(&rows, out, |msg| eprintln!("{msg}")) {
        Ok(results) => {
            println!("problem,kernel,rel_l2,iterations,seconds");
            let mut any_failed = false;
            for r in &results {
                println!(
                    "{},{},{},{},{:.1}",
                    r.problem,
                    r.kernel,
                    r.rel_l2.map(|v| format!("{v:.3e}")).unwrap_or_default(),
                    r.iterations,
                    r.seconds
                );
                if r.error.is_some() {
                    any_failed = true;
                }
            }
            if any_failed {
                ExitCode::from(EXIT_RUN_FAILURE)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}

fn cmd_verify(kind: &str) -> ExitCode {
    let results = match kind {
        "kron" => verify::kron_suite(50, 2024),
        "gradcheck" => verify::gradcheck_suite(),
        "spectrum" => verify::spectrum_suite(20, 2024),
        "manufactured" => verify::manufactured_suite(),
        other => {
            eprintln!(
                "error: unknown verify kind `{other}` \
                 (expected gradcheck|spectrum|kron|manufactured)"
            );
            return ExitCode::from(EXIT_CONFIG_ERROR);
        }
    };
    let mut all_ok = true;
    for r in &results {
        println!(
            "{}: worst {:.3e} (threshold {:.1e}) ... {}",
            r.name,
            r.worst,
            r.threshold,
            if r.passed { "ok" } else { "FAILED" }
        );
        all_ok &= r.passed;
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUN_FAILURE)
    }
}
