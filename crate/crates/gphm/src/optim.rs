//! Adam-based minimization of the training objective with the reference
//! initialization, stopping rule, trace recording and the learned-frequency
//! report.
//!
//! Initialization: `U = 0`, per-component weights `1/Q` (stored in the log
//! domain, which is what induces the weight sparsity), length-scales 1,
//! frequencies `linspace(0, F, Q)` in cycles, and unit likelihood precisions.
//! Training stops when the summed boundary and residual mean-squared losses
//! drop below the threshold, or at the iteration cap. The loop is
//! single-threaded and deterministic; identical inputs produce bitwise
//! identical traces.

use crate::autodiff::Tape;
use crate::error::{GphmError, Result};
use crate::kernels::{KernelKind, MixtureComponent, SpectralMixtureParams};
use crate::model::{BoundaryData, Grid, ObjectiveContext, SolutionState};
use crate::pde::PdeProblem;
use ndarray::{ArrayD, IxDyn};
use std::time::Instant;

/// Training hyperparameters. Defaults follow the reference experimental
/// settings: learning rate 1e-2, up to 1M iterations, stop when the boundary
/// plus residual mean-squared losses fall below 1e-6, Q = 30 components,
/// boundary weight 500.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub stop_threshold: f64,
    pub q: usize,
    /// Ending frequency F (cycles): component frequencies initialize to
    /// `linspace(0, F, Q)`.
    pub ending_frequency: f64,
    pub lambda_b: f64,
    pub seed: u64,
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_iters: 1_000_000,
            stop_threshold: 1e-6,
            q: 30,
            ending_frequency: 20.0,
            lambda_b: 500.0,
            seed: 0,
            trace_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.max_iters > 0
            && self.stop_threshold > 0.0
            && self.q >= 1
            && self.ending_frequency >= 0.0
            && self.lambda_b > 0.0
            && self.trace_every > 0;
        if !ok {
            return Err(GphmError::Domain(
                "train config fields must be positive (Q >= 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub boundary_mse: f64,
    pub residual_mse: f64,
    pub wall_seconds: f64,
}

/// Logged steps with strictly increasing iteration numbers.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

/// `linspace(0, f, q)` frequency initialization.
pub fn linspace(hi: f64, q: usize) -> Vec<f64> {
    if q == 1 {
        return vec![0.0];
    }
    (0..q).map(|i| hi * i as f64 / (q - 1) as f64).collect()
}

/// Reference initialization: zero solution, uniform log-weights `log(1/Q)`,
/// unit length-scales, evenly spaced frequencies, unit precisions.
pub fn initialize(grid: &Grid, config: &TrainConfig, kind: KernelKind) -> SolutionState {
    let q = match kind {
        KernelKind::SE | KernelKind::Matern52 => 1,
        _ => config.q,
    };
    let freqs = match kind {
        KernelKind::SE | KernelKind::Matern52 => vec![0.0],
        _ => linspace(config.ending_frequency, q),
    };
    let components: Vec<MixtureComponent> = freqs
        .iter()
        .map(|&mu| MixtureComponent::new((1.0 / q as f64).ln(), mu, 0.0))
        .collect();
    let params = SpectralMixtureParams {
        kind,
        components,
    };
    SolutionState {
        u: ArrayD::zeros(IxDyn(&grid.shape())),
        kernel_params: vec![params; grid.ndim()],
        log_tau1: 0.0,
        log_tau2: 0.0,
    }
}

/// Adam moment buffers. beta1/beta2/epsilon use the standard defaults
/// 0.9 / 0.999 / 1e-8 with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// One reported mixture component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyComponent {
    pub weight: f64,
    pub relative_weight: f64,
    /// Learned frequency magnitude in cycles per unit input.
    pub mu_cycles: f64,
    /// Angular frequency `2 pi |mu|`.
    pub omega_angular: f64,
    pub lengthscale: f64,
    /// Relative weight below 1e-3.
    pub pruned: bool,
}

/// Per-dimension learned components sorted by weight, heaviest first.
#[derive(Debug, Clone, Default)]
pub struct FrequencyReport {
    pub dims: Vec<Vec<FrequencyComponent>>,
}

pub const PRUNE_RELATIVE_WEIGHT: f64 = 1e-3;

/// Summarizes the learned weights and frequencies. Frequencies are reported
/// as magnitudes (the kernel is even in the frequency), in both cycle and
/// angular conventions.
pub fn frequency_report(state: &SolutionState) -> FrequencyReport {
    let dims = state
        .kernel_params
        .iter()
        .map(|p| {
            let total: f64 = p.components.iter().map(|c| c.weight()).sum();
            let mut comps: Vec<FrequencyComponent> = p
                .components
                .iter()
                .map(|c| {
                    let w = c.weight();
                    let rel = w / total;
                    FrequencyComponent {
                        weight: w,
                        relative_weight: rel,
                        mu_cycles: c.frequency.abs(),
                        omega_angular: 2.0 * std::f64::consts::PI * c.frequency.abs(),
                        lengthscale: c.lengthscale(),
                        pruned: rel < PRUNE_RELATIVE_WEIGHT,
                    }
                })
                .collect();
            comps.sort_by(|a, b| b.weight.total_cmp(&a.weight));
            comps
        })
        .collect();
    FrequencyReport { dims }
}

/// Final state, trace and report of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: SolutionState,
    pub trace: TrainTrace,
    pub report: FrequencyReport,
    pub iterations_run: usize,
    pub final_loss: f64,
    pub final_boundary_mse: f64,
    pub final_residual_mse: f64,
    pub stopped_by_threshold: bool,
}

/// Optional per-trace-row callback (used by the CLI to stream progress).
pub type TraceCallback<'a> = dyn FnMut(&TraceRow) + 'a;

/// Minimizes the objective with Adam until the stopping rule fires or the
/// iteration cap is reached.
pub fn train(
    problem: &PdeProblem,
    grid: &Grid,
    config: &TrainConfig,
    kind: KernelKind,
) -> Result<TrainOutcome> {
    train_with_callback(problem, grid, config, kind, &mut |_| {})
}

pub fn train_with_callback(
    problem: &PdeProblem,
    grid: &Grid,
    config: &TrainConfig,
    kind: KernelKind,
    on_trace: &mut TraceCallback<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let boundary = BoundaryData::from_exact(grid, &problem.exact);
    let init = initialize(grid, config, kind);
    let ctx = ObjectiveContext::new(
        grid.clone(),
        problem.clone(),
        boundary,
        config.lambda_b,
        init.clone(),
    )?;
    let n_b = ctx.boundary.len() as f64;
    let m = grid.total_points() as f64;

    let template = init.to_params();
    let mut params: Vec<f64> = template.values().to_vec();
    let mut adam = AdamState::new(params.len());
    let mut grads = vec![0.0; params.len()];
    let mut trace = TrainTrace::default();
    let mut iterations_run = 0;
    let mut stopped_by_threshold = false;
    let mut final_stats = (f64::NAN, f64::NAN, f64::NAN);

    for iter in 0..=config.max_iters {
        let mut tape = Tape::new();
        let built = ctx.build(&mut tape, &params).map_err(|e| match e {
            GphmError::GradientNonFinite { op } => GphmError::ObjectiveNonFinite { term: op },
            other => other,
        })?;
        let loss = tape.scalar_value(built.loss);
        let boundary_mse = tape.scalar_value(built.boundary_sq) / n_b;
        let residual_mse = tape.scalar_value(built.residual_sq) / m;
        final_stats = (loss, boundary_mse, residual_mse);

        if iter % config.trace_every == 0 || iter == config.max_iters {
            let row = TraceRow {
                iteration: iter,
                loss,
                boundary_mse,
                residual_mse,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            on_trace(&row);
            trace.rows.push(row);
        }

        if boundary_mse + residual_mse < config.stop_threshold {
            stopped_by_threshold = true;
            break;
        }
        if iter == config.max_iters {
            break;
        }

        let g = tape.gradient(built.loss)?;
        grads.fill(0.0);
        for (var, range) in &built.leaves {
            let leaf_grad = g.wrt(&tape, *var);
            for (slot, gv) in grads[range.clone()].iter_mut().zip(leaf_grad.iter()) {
                *slot += gv;
            }
        }
        if let Some(bad) = grads.iter().position(|x| !x.is_finite()) {
            return Err(GphmError::TrainingAbort {
                iteration: iter,
                param: template.names()[bad].clone(),
            });
        }
        adam.step(&mut params, &grads, config.learning_rate);
        iterations_run = iter + 1;
    }

    // Ensure the final point is recorded even off the trace cadence.
    if trace.rows.last().map(|r| r.iteration) != Some(iterations_run) {
        let row = TraceRow {
            iteration: iterations_run,
            loss: final_stats.0,
            boundary_mse: final_stats.1,
            residual_mse: final_stats.2,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_trace(&row);
        trace.rows.push(row);
    }

    let state = init.from_params(&template.with_values(params));
    let report = frequency_report(&state);
    Ok(TrainOutcome {
        state,
        trace,
        report,
        iterations_run,
        final_loss: final_stats.0,
        final_boundary_mse: final_stats.1,
        final_residual_mse: final_stats.2,
        stopped_by_threshold,
    })
}
