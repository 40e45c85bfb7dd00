use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use filter_funnel::config::ExperimentConfig;
use filter_funnel::experiment::{self, exit};

#[derive(Parser)]
#[command(name = "funnel", version, about = "Filter-based funnel control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the closed loop and write trace, state and metadata files.
    Simulate {
        config: PathBuf,
        /// Output directory; overrides `[output] dir`.
        #[arg(long, env = "FUNNEL_OUTPUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Check the initial-value conditions without simulating.
    Feasible { config: PathBuf },
    /// Check the trajectory identities and the funnel bound of a stored run.
    Diagnose { csv: PathBuf, config: PathBuf },
    /// Run every cell of the `[sweep]` axes.
    Sweep {
        config: PathBuf,
        #[arg(long, env = "FUNNEL_OUTPUT_DIR")]
        out_dir: Option<PathBuf>,
        /// Worker threads; overrides `[sweep] workers`.
        #[arg(long, env = "FUNNEL_WORKERS")]
        workers: Option<usize>,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(exit::FAILURE as u8)
    })
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn run(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Simulate { config, out_dir } => {
            let cfg = load(&config)?;
            let out = experiment::run_simulate(&cfg, out_dir.as_deref());
            if let Some(b) = &out.bundle {
                println!("trace: {}", b.trace.display());
                println!("state: {}", b.state.display());
                println!("metadata: {}", b.meta.display());
            }
            if out.exit_code == exit::OK {
                println!("{}", out.message);
            } else {
                eprintln!("{}", out.message);
            }
            Ok(code(out.exit_code))
        }
        Command::Feasible { config } => {
            let cfg = load(&config)?;
            let rep = experiment::run_feasible(&cfg).map_err(|e| {
                eprintln!("{e}");
                code(e.exit_code())
            })?;
            print!("{}", rep.render());
            Ok(code(if rep.feasible { exit::OK } else { exit::INFEASIBLE }))
        }
        Command::Diagnose { csv, config } => {
            let cfg = load(&config)?;
            let rep = experiment::run_diagnose(&csv, &cfg).map_err(|e| {
                eprintln!("{e}");
                code(e.exit_code())
            })?;
            print!("{}", rep.render());
            Ok(code(if rep.passed() { exit::OK } else { exit::CHECK_FAILED }))
        }
        Command::Sweep {
            config,
            out_dir,
            workers,
        } => {
            let cfg = load(&config)?;
            let summary = experiment::run_sweep(&cfg, workers).map_err(|e| {
                eprintln!("{e}");
                code(e.exit_code())
            })?;
            let dir = out_dir.unwrap_or_else(|| cfg.output.dir.clone());
            let path = experiment::write_sweep(&summary, &dir, &cfg.output.stem).map_err(|e| {
                eprintln!("{e}");
                code(e.exit_code())
            })?;
            print!("{}", summary.render());
            println!("summary: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse()).unwrap_or_else(|c| c)
}
