use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stageflow_bench::{emit_csv, run_benchmark, write_csv, BenchConfig, Mode, WorkloadKind};

#[derive(Parser)]
#[command(name = "stageflow-bench", about = "Compare eager and staged execution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one workload and write a CSV report.
    Bench {
        #[arg(long, value_enum)]
        workload: WorkloadKind,
        #[arg(long, value_enum, default_value_t = Mode::Staged)]
        mode: Mode,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Executor worker threads; 0 uses every core.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let Command::Bench { workload, mode, batch, iters, warmup, repeats, workers, seed, out } = Cli::parse().command;
    let cfg = BenchConfig { workload, mode, batch, iters, warmup, repeats, workers, seed };
    let result = run_benchmark(&cfg).and_then(|report| match &out {
        Some(path) => emit_csv(&report, path),
        None => write_csv(&report, io::stdout().lock()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
