//! Eager-versus-staged benchmark harness with a numerical equivalence gate
//! and CSV reporting.

pub mod workloads;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use stageflow::{Runtime, RuntimeOptions};

pub use workloads::{Mode, Workload, WorkloadKind};

/// Keeps freed buffers for reuse instead of returning them to the OS, so
/// per-step allocation cost is the same in both modes and small.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Largest per-iteration loss gap tolerated between eager and staged runs.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

pub const CSV_HEADER: &str = "workload,mode,batch,iters,examples_per_sec,stddev,trace_count,copies";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("eager and staged losses diverge at iteration {iter}: {eager} vs {staged}")]
    NumericalDivergence { iter: usize, eager: f64, staged: f64 },
    #[error("storage error: {0}")]
    Storage(String),
    #[error(transparent)]
    Runtime(#[from] stageflow::Error),
}

impl BenchError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::NumericalDivergence { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub workload: WorkloadKind,
    pub mode: Mode,
    pub batch: usize,
    pub iters: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Executor worker threads; 0 uses the hardware parallelism.
    pub workers: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(workload: WorkloadKind, mode: Mode) -> BenchConfig {
        BenchConfig { workload, mode, batch: 32, iters: 10, warmup: 1, repeats: 3, workers: 1, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.iters < 1 {
            return Err(BenchError::Config("iters must be at least 1".into()));
        }
        if self.repeats < 1 {
            return Err(BenchError::Config("repeats must be at least 1".into()));
        }
        if self.batch < 1 {
            return Err(BenchError::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    fn runtime(&self) -> Runtime {
        Runtime::new(RuntimeOptions { workers: self.workers, seed: self.seed, ..RuntimeOptions::default() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    /// Steady-state wall time of the timed iterations.
    pub wall_time: Duration,
    pub examples_per_sec: f64,
    /// Time spent tracing and optimizing, all of it inside warmup.
    pub trace_time: Duration,
    /// Traces when timing started.
    pub traces_after_warmup: u64,
    /// Traces when timing ended; equal to `traces_after_warmup` when the
    /// cache is stable.
    pub trace_count: u64,
    pub cache_size: usize,
    pub copies: u64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub runs: Vec<RunReport>,
    pub mean_examples_per_sec: f64,
    /// Sample standard deviation across repeats; 0 for a single repeat.
    pub stddev_examples_per_sec: f64,
}

/// Per-iteration losses of `iters` steps from a fresh runtime.
pub fn losses(cfg: &BenchConfig, mode: Mode, iters: usize) -> Result<Vec<f64>, BenchError> {
    let rt = cfg.runtime();
    let _guard = rt.enter();
    let mut w = workloads::build(cfg.workload, mode, cfg.batch, cfg.seed)?;
    (0..iters).map(|_| w.step().map_err(BenchError::from)).collect()
}

/// Fails with `NumericalDivergence` at the first iteration whose eager and
/// staged losses differ by more than `EQUIVALENCE_TOLERANCE`.
pub fn equivalence_gate(cfg: &BenchConfig) -> Result<(), BenchError> {
    let n = cfg.warmup + cfg.iters;
    compare_losses(&losses(cfg, Mode::Eager, n)?, &losses(cfg, Mode::Staged, n)?)
}

/// Per-iteration comparison behind the gate. NaN never matches.
pub fn compare_losses(eager: &[f64], staged: &[f64]) -> Result<(), BenchError> {
    for (iter, (&e, &s)) in eager.iter().zip(staged).enumerate() {
        if !((e - s).abs() <= EQUIVALENCE_TOLERANCE) {
            return Err(BenchError::NumericalDivergence { iter, eager: e, staged: s });
        }
    }
    Ok(())
}

fn run_once(cfg: &BenchConfig) -> Result<RunReport, BenchError> {
    let rt = cfg.runtime();
    let _guard = rt.enter();
    let mut w = workloads::build(cfg.workload, cfg.mode, cfg.batch, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.warmup + cfg.iters);
    for _ in 0..cfg.warmup {
        losses.push(w.step()?);
    }
    let m = rt.metrics();
    let traces_after_warmup = m.traces();
    let start = Instant::now();
    for _ in 0..cfg.iters {
        losses.push(w.step()?);
    }
    let wall_time = start.elapsed();
    Ok(RunReport {
        wall_time,
        examples_per_sec: (cfg.batch * cfg.iters) as f64 / wall_time.as_secs_f64().max(1e-12),
        trace_time: m.trace_time(),
        traces_after_warmup,
        trace_count: m.traces(),
        cache_size: w.cache_size(),
        copies: m.transparent_copies(),
        losses,
    })
}

/// Gates on eager/staged equivalence, then times `repeats` fresh runs.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    equivalence_gate(cfg)?;
    let runs = (0..cfg.repeats).map(|_| run_once(cfg)).collect::<Result<Vec<_>, _>>()?;
    let rates: Vec<f64> = runs.iter().map(|r| r.examples_per_sec).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let stddev = if rates.len() > 1 {
        (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rates.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BenchReport { config: cfg.clone(), runs, mean_examples_per_sec: mean, stddev_examples_per_sec: stddev })
}

/// One row per repeat with an empty stddev, then a mean row carrying the
/// stddev and the last run's counters.
pub fn write_csv<W: Write>(report: &BenchReport, out: W) -> Result<(), BenchError> {
    let storage = |e: csv::Error| BenchError::Storage(e.to_string());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER.split(',')).map_err(storage)?;
    let c = &report.config;
    let row = |rate: f64, stddev: String, run: &RunReport| {
        [
            c.workload.to_string(),
            c.mode.to_string(),
            c.batch.to_string(),
            c.iters.to_string(),
            format!("{rate:.3}"),
            stddev,
            run.trace_count.to_string(),
            run.copies.to_string(),
        ]
    };
    for run in &report.runs {
        w.write_record(row(run.examples_per_sec, String::new(), run)).map_err(storage)?;
    }
    let last = report.runs.last().expect("validated repeats >= 1");
    w.write_record(row(report.mean_examples_per_sec, format!("{:.3}", report.stddev_examples_per_sec), last))
        .map_err(storage)?;
    w.flush().map_err(|e| BenchError::Storage(e.to_string()))
}

pub fn emit_csv(report: &BenchReport, path: &Path) -> Result<(), BenchError> {
    let file = File::create(path).map_err(|e| BenchError::Storage(format!("{}: {e}", path.display())))?;
    write_csv(report, BufWriter::new(file))
}
