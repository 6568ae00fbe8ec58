use std::process::Command;

use stageflow::{Runtime, RuntimeOptions};
use stageflow_bench::workloads::{build, Leapfrog, LEAPFROG_PRECISION, LEAPFROG_STEPS, LEAPFROG_STEP_SIZE};
use stageflow_bench::{
    compare_losses, emit_csv, losses, run_benchmark, write_csv, BenchConfig, BenchError, Mode, Workload, WorkloadKind,
    CSV_HEADER,
};

fn small(workload: WorkloadKind, mode: Mode) -> BenchConfig {
    BenchConfig { batch: 4, iters: 2, warmup: 1, repeats: 3, ..BenchConfig::new(workload, mode) }
}

fn csv_of(cfg: &BenchConfig) -> String {
    let mut out = Vec::new();
    write_csv(&run_benchmark(cfg).unwrap(), &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn three_repeats_give_four_data_rows() {
    let text = csv_of(&small(WorkloadKind::MicroopLoop, Mode::Staged));
    assert!(!text.contains('\r'));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 5);
    for row in &lines[1..4] {
        assert!(row.starts_with("microop_loop,staged,4,2,"), "{row}");
        assert_eq!(row.split(',').nth(5), Some(""));
    }
    assert!(!lines[4].split(',').nth(5).unwrap().is_empty());
}

#[test]
fn same_seed_reproduces_non_timing_columns() {
    let strip = |text: String| -> Vec<String> {
        text.lines()
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                [&cols[..4], &cols[6..]].concat().join(",")
            })
            .collect()
    };
    let cfg = small(WorkloadKind::MlpTrain, Mode::Staged);
    assert_eq!(strip(csv_of(&cfg)), strip(csv_of(&cfg)));
}

#[test]
fn unwritable_path_is_storage_error() {
    let report = run_benchmark(&small(WorkloadKind::MicroopLoop, Mode::Eager)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = emit_csv(&report, &dir.path().join("missing").join("out.csv")).unwrap_err();
    assert!(matches!(err, BenchError::Storage(_)), "{err:?}");
    let path = dir.path().join("out.csv");
    emit_csv(&report, &path).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 5);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        BenchConfig { iters: 0, ..small(WorkloadKind::Leapfrog, Mode::Eager) },
        BenchConfig { repeats: 0, ..small(WorkloadKind::Leapfrog, Mode::Eager) },
        BenchConfig { batch: 0, ..small(WorkloadKind::Leapfrog, Mode::Eager) },
    ] {
        let err = run_benchmark(&cfg).unwrap_err();
        assert!(matches!(err, BenchError::Config(_)), "{err:?}");
        assert_eq!(err.exit_code(), 1);
    }
}

#[test]
fn gate_reports_first_divergent_iteration() {
    compare_losses(&[1.0, 2.0], &[1.0 + 5e-6, 2.0]).unwrap();
    let err = compare_losses(&[1.0, 2.0, 3.0], &[1.0, 2.1, 3.5]).unwrap_err();
    assert!(matches!(err, BenchError::NumericalDivergence { iter: 1, .. }), "{err:?}");
    assert_eq!(err.exit_code(), 2);
    assert!(compare_losses(&[f64::NAN], &[f64::NAN]).is_err());
}

#[test]
fn every_workload_passes_the_gate() {
    for kind in [WorkloadKind::MlpTrain, WorkloadKind::Leapfrog, WorkloadKind::MicroopLoop] {
        let cfg = BenchConfig { batch: 8, ..BenchConfig::new(kind, Mode::Staged) };
        compare_losses(&losses(&cfg, Mode::Eager, 5).unwrap(), &losses(&cfg, Mode::Staged, 5).unwrap()).unwrap();
    }
}

#[test]
fn mlp_staged_traces_forward_and_update_once() {
    let report = run_benchmark(&BenchConfig { iters: 5, ..small(WorkloadKind::MlpTrain, Mode::Staged) }).unwrap();
    for run in &report.runs {
        assert_eq!(run.traces_after_warmup, 2);
        assert_eq!(run.trace_count, 2);
        assert_eq!(run.cache_size, 2);
        assert!(run.trace_time > std::time::Duration::ZERO);
    }
    let losses = &report.runs[0].losses;
    assert!(losses.last().unwrap() < &losses[0], "training should reduce the loss: {losses:?}");
}

/// Closed-form leapfrog in plain f64 arithmetic: grad U(q) = qA for
/// symmetric A.
fn reference_leapfrog(q: &mut [f64; 2], p: &mut [f64; 2]) {
    let a = LEAPFROG_PRECISION;
    let grad = |q: &[f64; 2]| [q[0] * a[0] + q[1] * a[2], q[0] * a[1] + q[1] * a[3]];
    let h = LEAPFROG_STEP_SIZE / 2.0;
    for _ in 0..LEAPFROG_STEPS {
        let g = grad(q);
        for i in 0..2 {
            p[i] -= h * g[i];
            q[i] += LEAPFROG_STEP_SIZE * p[i];
        }
        let g = grad(q);
        for i in 0..2 {
            p[i] -= h * g[i];
        }
    }
}

#[test]
fn leapfrog_matches_hand_integrator() {
    let rt = Runtime::new(RuntimeOptions { workers: 1, ..RuntimeOptions::default() });
    let _g = rt.enter();
    for mode in [Mode::Eager, Mode::Staged] {
        let mut w = Leapfrog::new(mode, 3, 7).unwrap();
        let start = w.state().unwrap();
        let (mut qs, mut ps) = (start[..6].to_vec(), start[6..].to_vec());
        for _ in 0..3 {
            w.step().unwrap();
            for i in 0..3 {
                let mut q = [qs[2 * i], qs[2 * i + 1]];
                let mut p = [ps[2 * i], ps[2 * i + 1]];
                reference_leapfrog(&mut q, &mut p);
                qs[2 * i..2 * i + 2].copy_from_slice(&q);
                ps[2 * i..2 * i + 2].copy_from_slice(&p);
            }
        }
        let got = w.state().unwrap();
        let want: Vec<f64> = qs.iter().chain(&ps).copied().collect();
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12, "{mode}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn microop_loop_adds_one_thousand() {
    let rt = Runtime::new(RuntimeOptions::default());
    let _g = rt.enter();
    let mut w = build(WorkloadKind::MicroopLoop, Mode::Staged, 2, 0).unwrap();
    assert_eq!(w.step().unwrap(), 1000.0);
}

#[test]
fn cli_writes_csv_and_maps_errors_to_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_stageflow-bench");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let ok = Command::new(exe)
        .args(["bench", "--workload", "leapfrog", "--mode", "staged", "--batch", "4", "--iters", "2"])
        .args(["--warmup", "1", "--repeats", "2", "--workers", "2", "--seed", "3", "--out"])
        .arg(&path)
        .status()
        .unwrap();
    assert_eq!(ok.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().starts_with("leapfrog,staged,4,2,"));

    let bad = Command::new(exe).args(["bench", "--workload", "mlp_train", "--iters", "0"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("iters"));
}
