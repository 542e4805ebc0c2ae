//! Benchmark sweeps mirroring the reference result tables: one row per
//! (problem, kernel) with relative L2 error, iteration count and wall time.
//!
//! The `desk` suite uses frequency-scaled problems and small budgets so the
//! whole table finishes within the acceptance runtimes. The `paper` suite
//! registers the reference problems at their full settings (Q = 30, up to 1M
//! iterations); it is documented as an hours-long run and is not part of CI.

use crate::config::RunConfig;
use crate::runner::{run_solve, write_artifacts};
use gphm::kernels::KernelKind;
use std::fmt::Write as _;
use std::path::Path;

/// One benchmark row specification.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub problem: &'static str,
    pub kernel: KernelKind,
    pub grid_sizes: Vec<usize>,
    pub q: usize,
    pub f: f64,
    pub max_iters: usize,
}

/// Completed row.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub problem: String,
    pub kernel: String,
    pub rel_l2: Option<f64>,
    pub iterations: usize,
    pub seconds: f64,
    pub error: Option<String>,
}

pub fn desk_rows() -> Vec<BenchRow> {
    // Ending frequency 1 keeps the initial spectral mass in the low band;
    // components migrate upward to lock the high frequencies.
    let one_d = |problem, kernel| BenchRow {
        problem,
        kernel,
        grid_sizes: vec![400],
        q: 10,
        f: 1.0,
        max_iters: 42_000,
    };
    vec![
        one_d("poisson1d_sin_k20", KernelKind::StM),
        one_d("poisson1d_mix_k20", KernelKind::StM),
        one_d("poisson1d_mix_k20", KernelKind::GM),
        one_d("allencahn1d_sin_k20", KernelKind::StM),
        BenchRow {
            problem: "poisson2d_sin_k3",
            kernel: KernelKind::StM,
            grid_sizes: vec![30, 30],
            q: 5,
            f: 1.0,
            max_iters: 15_000,
        },
        BenchRow {
            problem: "advection1d_c5",
            kernel: KernelKind::StM,
            grid_sizes: vec![40, 40],
            q: 5,
            f: 1.0,
            max_iters: 40_000,
        },
    ]
}

pub fn paper_rows() -> Vec<BenchRow> {
    // Ending frequency chosen from {20, 40, 100} to cover each solution's
    // frequency content in cycles; meshes are the first of the reference
    // ladder (400 for 1D, 200x200 for 2D).
    let mut rows = Vec::new();
    let spec: &[(&str, f64, usize)] = &[
        ("poisson1d_u1", 20.0, 1),
        ("poisson1d_u2", 20.0, 1),
        ("poisson1d_u3", 20.0, 1),
        ("poisson1d_u4", 40.0, 1),
        ("poisson1d_u5", 100.0, 1),
        ("poisson2d_u6", 20.0, 2),
        ("poisson2d_u7", 20.0, 2),
        ("allencahn1d_u1", 20.0, 1),
        ("allencahn1d_u2", 20.0, 1),
        ("allencahn2d", 20.0, 2),
        ("advection1d", 40.0, 2),
    ];
    for &(problem, f, dim) in spec {
        for kernel in [KernelKind::StM, KernelKind::GM] {
            rows.push(BenchRow {
                problem,
                kernel,
                grid_sizes: if dim == 1 { vec![400] } else { vec![200, 200] },
                q: 30,
                f,
                max_iters: 1_000_000,
            });
        }
    }
    rows
}

/// Runs a suite sequentially and writes `benchmark.csv` plus per-row
/// artifact directories under `out_dir`. Returns the rows; any row error is
/// recorded rather than aborting the sweep.
pub fn run_suite(
    rows: &[BenchRow],
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> std::io::Result<Vec<BenchResult>> {
    std::fs::create_dir_all(out_dir)?;
    let mut results = Vec::new();
    for row in rows {
        let label = format!("{}-{}", row.problem, row.kernel);
        progress(&format!("running {label} (grid {:?})", row.grid_sizes));
        let cfg = RunConfig {
            problem: row.problem.to_string(),
            grid_sizes: Some(row.grid_sizes.clone()),
            kernel: row.kernel,
            q: row.q,
            f: row.f,
            max_iters: row.max_iters,
            output_dir: out_dir.join(&label),
            ..RunConfig::default()
        };
        let t0 = std::time::Instant::now();
        match run_solve(&cfg, &mut |_| {}) {
            Ok(artifacts) => {
                let dim = artifacts.summary.grid_sizes.len();
                write_artifacts(&cfg.output_dir, &artifacts, dim)?;
                let rel = artifacts
                    .summary
                    .rel_l2_offgrid
                    .unwrap_or(artifacts.summary.rel_l2_ongrid);
                progress(&format!(
                    "  {label}: rel_l2 {rel:.3e} after {} iterations",
                    artifacts.summary.iterations_run
                ));
                results.push(BenchResult {
                    problem: row.problem.to_string(),
                    kernel: row.kernel.to_string(),
                    rel_l2: Some(rel),
                    iterations: artifacts.summary.iterations_run,
                    seconds: t0.elapsed().as_secs_f64(),
                    error: None,
                });
            }
            Err(e) => {
                progress(&format!("  {label}: FAILED ({e})"));
                results.push(BenchResult {
                    problem: row.problem.to_string(),
                    kernel: row.kernel.to_string(),
                    rel_l2: None,
                    iterations: 0,
                    seconds: t0.elapsed().as_secs_f64(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let mut csv = String::from("problem,kernel,rel_l2,iterations,seconds,error\n");
    for r in &results {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.problem,
            r.kernel,
            r.rel_l2.map(|v| v.to_string()).unwrap_or_default(),
            r.iterations,
            r.seconds,
            r.error.clone().unwrap_or_default()
        );
    }
    std::fs::write(out_dir.join("benchmark.csv"), csv)?;
    Ok(results)
}
