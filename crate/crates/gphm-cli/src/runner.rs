//! Executes one configured solve and writes the result artifacts:
//! `solution.csv`, `summary.json`, `components.csv` and `trace.csv`.
//!
//! `summary.json` is byte-deterministic for a fixed config and seed: fields
//! are declared in sorted order, floats use the shortest round-trip
//! representation, and wall-clock timing is deliberately kept out of the file
//! (it lives in `trace.csv` and on stdout).

use crate::config::RunConfig;
use gphm::model::{predict_offgrid, Grid};
use gphm::optim::{train_with_callback, FrequencyReport, TrainConfig, TrainOutcome};
use gphm::pde::{make_problem, relative_l2, PdeProblem};
use serde::Serialize;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

/// One learned component row of the summary, ordered by descending weight
/// within each dimension.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ComponentRow {
    pub dim: usize,
    pub lengthscale: f64,
    pub mu_cycles: f64,
    pub omega_angular: f64,
    pub pruned: bool,
    pub relative_weight: f64,
    pub weight: f64,
}

/// Machine-readable run result. Field order is alphabetical so the JSON key
/// order is deterministic.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunSummary {
    pub components: Vec<ComponentRow>,
    pub final_boundary_mse: f64,
    pub final_residual_mse: f64,
    pub grid_sizes: Vec<usize>,
    pub iterations_run: usize,
    pub kernel: String,
    pub problem: String,
    pub rel_l2_offgrid: Option<f64>,
    pub rel_l2_ongrid: f64,
    pub seed: u64,
    pub stopped_by_threshold: bool,
    /// Wall-clock seconds; excluded from summary.json to keep it
    /// byte-deterministic across repeat runs.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Everything produced by a run, with the evaluation tables used for the CSV
/// artifacts.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub outcome: TrainOutcome,
    /// Rows of (coordinates, prediction, exact): the off-grid refined set for
    /// 1D problems, the training grid for 2D.
    pub eval_rows: Vec<(Vec<f64>, f64, f64)>,
}

fn component_rows(report: &FrequencyReport) -> Vec<ComponentRow> {
    let mut rows = Vec::new();
    for (dim, comps) in report.dims.iter().enumerate() {
        for c in comps {
            rows.push(ComponentRow {
                dim,
                lengthscale: c.lengthscale,
                mu_cycles: c.mu_cycles,
                omega_angular: c.omega_angular,
                pruned: c.pruned,
                relative_weight: c.relative_weight,
                weight: c.weight,
            });
        }
    }
    rows
}

/// Runs training and evaluation for one config. `on_trace` streams progress.
pub fn run_solve(
    config: &RunConfig,
    on_trace: &mut dyn FnMut(&gphm::optim::TraceRow),
) -> gphm::Result<RunArtifacts> {
    let problem = make_problem(&config.problem)?;
    let sizes = config.sizes_for_dim(problem.dim);
    let grid = Grid::for_problem(&problem, &sizes)?;
    let train_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        max_iters: config.max_iters,
        stop_threshold: config.stop_threshold,
        q: config.q,
        ending_frequency: config.f,
        lambda_b: config.lambda_b,
        seed: config.seed,
        trace_every: 200,
    };
    let outcome = train_with_callback(&problem, &grid, &train_cfg, config.kernel, on_trace)?;
    let (eval_rows, rel_ongrid, rel_offgrid) =
        evaluate_solution(&problem, &grid, &outcome, config.eval_refinement)?;
    let summary = RunSummary {
        components: component_rows(&outcome.report),
        final_boundary_mse: outcome.final_boundary_mse,
        final_residual_mse: outcome.final_residual_mse,
        grid_sizes: sizes,
        iterations_run: outcome.iterations_run,
        kernel: config.kernel.to_string(),
        problem: config.problem.clone(),
        rel_l2_offgrid: rel_offgrid,
        rel_l2_ongrid: rel_ongrid,
        seed: config.seed,
        stopped_by_threshold: outcome.stopped_by_threshold,
        wall_seconds: outcome
            .trace
            .rows
            .last()
            .map(|r| r.wall_seconds)
            .unwrap_or(0.0),
    };
    Ok(RunArtifacts {
        summary,
        outcome,
        eval_rows,
    })
}

/// On-grid error everywhere; additionally the refined off-grid error for 1D.
/// Returns the rows backing `solution.csv`.
#[allow(clippy::type_complexity)]
pub fn evaluate_solution(
    problem: &PdeProblem,
    grid: &Grid,
    outcome: &TrainOutcome,
    eval_refinement: usize,
) -> gphm::Result<(Vec<(Vec<f64>, f64, f64)>, f64, Option<f64>)> {
    // On-grid: the solution estimate itself.
    let exact_grid = grid.evaluate(&problem.exact);
    let pred_grid: Vec<f64> = outcome.state.u.iter().copied().collect();
    let exact_vals: Vec<f64> = exact_grid.iter().copied().collect();
    let rel_ongrid = relative_l2(&pred_grid, &exact_vals)?;

    if problem.dim == 1 {
        let (lo, hi) = problem.bounds[0];
        let m = grid.shape()[0];
        let n = (m - 1) * eval_refinement;
        let queries: Vec<Vec<f64>> = (0..=n)
            .map(|i| vec![lo + (hi - lo) * i as f64 / n as f64])
            .collect();
        let pred = predict_offgrid(&outcome.state, grid, &queries)?;
        let exact: Vec<f64> = queries.iter().map(|x| (problem.exact)(x)).collect();
        let rel_off = relative_l2(&pred, &exact)?;
        let rows = queries
            .into_iter()
            .zip(pred.into_iter().zip(exact))
            .map(|(x, (p, e))| (x, p, e))
            .collect();
        Ok((rows, rel_ongrid, Some(rel_off)))
    } else {
        let shape = grid.shape();
        let mut rows = Vec::with_capacity(grid.total_points());
        let mut multi = vec![0usize; shape.len()];
        for i in 0..grid.total_points() {
            rows.push((grid.point(&multi), pred_grid[i], exact_vals[i]));
            for j in (0..shape.len()).rev() {
                multi[j] += 1;
                if multi[j] < shape[j] {
                    break;
                }
                multi[j] = 0;
            }
        }
        Ok((rows, rel_ongrid, None))
    }
}

/// Writes the four artifacts into `dir`, creating it if needed.
pub fn write_artifacts(dir: &Path, artifacts: &RunArtifacts, dim: usize) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;

    // solution.csv: evaluation rows with shortest round-trip doubles.
    let mut csv = String::new();
    let coord_header = match dim {
        1 => "x",
        2 => "x,y",
        _ => "x,y,z",
    };
    let _ = writeln!(csv, "{coord_header},u_pred,u_true,abs_err");
    for (coords, pred, exact) in &artifacts.eval_rows {
        let cs: Vec<String> = coords.iter().map(f64::to_string).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            cs.join(","),
            pred,
            exact,
            (pred - exact).abs()
        );
    }
    std::fs::write(dir.join("solution.csv"), csv)?;

    // summary.json with sorted keys (see RunSummary field order).
    let json = serde_json::to_string_pretty(&artifacts.summary).expect("serializable summary");
    std::fs::write(dir.join("summary.json"), json + "\n")?;

    // components.csv sorted by dimension then descending weight.
    let mut comp = String::from("dim,q,weight,relative_weight,mu_cycles,omega_angular,rho,pruned\n");
    let mut q_idx = 0usize;
    let mut last_dim = usize::MAX;
    for row in &artifacts.summary.components {
        if row.dim != last_dim {
            q_idx = 0;
            last_dim = row.dim;
        }
        let _ = writeln!(
            comp,
            "{},{},{},{},{},{},{},{}",
            row.dim,
            q_idx,
            row.weight,
            row.relative_weight,
            row.mu_cycles,
            row.omega_angular,
            row.lengthscale,
            row.pruned
        );
        q_idx += 1;
    }
    std::fs::write(dir.join("components.csv"), comp)?;

    // trace.csv (contains wall time; not part of the determinism contract).
    let mut trace = String::from("iteration,loss,boundary_mse,residual_mse,wall_seconds\n");
    for r in &artifacts.outcome.trace.rows {
        let _ = writeln!(
            trace,
            "{},{},{},{},{}",
            r.iteration, r.loss, r.boundary_mse, r.residual_mse, r.wall_seconds
        );
    }
    std::fs::write(dir.join("trace.csv"), trace)?;
    Ok(())
}

/// Convenience used by the CLI and tests: solve plus artifact writing.
pub fn solve_to_dir(
    config: &RunConfig,
    on_trace: &mut dyn FnMut(&gphm::optim::TraceRow),
) -> Result<RunArtifacts, String> {
    let artifacts = run_solve(config, on_trace).map_err(|e| format!("run failed: {e}"))?;
    let problem_dim = make_problem(&config.problem)
        .map(|p| p.dim)
        .unwrap_or(1);
    write_artifacts(&config.output_dir, &artifacts, problem_dim)
        .map_err(|e| format!("cannot write artifacts: {e}"))?;
    Ok(artifacts)
}

/// Parses and validates the `GPHM_THREADS` cap. All internal computation is
/// single-threaded and deterministic, so any positive cap is satisfied
/// trivially; the variable is validated to keep the contract honest.
pub fn thread_cap_from_env() -> Result<usize, String> {
    match std::env::var("GPHM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| format!("GPHM_THREADS must be a positive integer, got `{v}`")),
    }
}
