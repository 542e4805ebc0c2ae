//! Benchmark equation registry: Poisson, Allen-Cahn and advection problems
//! with manufactured exact solutions and analytically derived source terms.
//!
//! Each problem fixes a differential operator, a closed-form exact solution
//! `u`, and the source `f` obtained by substituting `u` into the operator.
//! [`verify_manufactured`] guards the hand-derived sources by re-deriving the
//! residual with high-order finite differences of the exact solution.
//!
//! Besides the reference problems, every family has desk-scale variants with
//! caller-supplied frequencies (for example `poisson1d_sin_k20`) so sweeps
//! finish in minutes; the reference frequencies stay registered for long runs.

use crate::error::{GphmError, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Closed-form scalar field on the domain.
pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Which grid faces carry Dirichlet data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryRule {
    /// Every face of the box (Dirichlet problems).
    AllFaces,
    /// The initial-time face plus the spatial faces; the final-time face is
    /// left free (advection).
    InitialPlusSpatial { time_dim: usize },
}

/// Differential operator composition. Multi-orders list the per-dimension
/// derivative order of each linear term; the Allen-Cahn variant adds the
/// cubic reaction `u (u^2 - 1)`.
#[derive(Debug, Clone)]
pub enum PdeForm {
    Linear { terms: Vec<(Vec<usize>, f64)> },
    AllenCahn { terms: Vec<(Vec<usize>, f64)> },
}

impl PdeForm {
    pub fn terms(&self) -> &[(Vec<usize>, f64)] {
        match self {
            PdeForm::Linear { terms } | PdeForm::AllenCahn { terms } => terms,
        }
    }

    pub fn has_reaction(&self) -> bool {
        matches!(self, PdeForm::AllenCahn { .. })
    }

    /// Distinct non-zero multi-orders needed to evaluate the residual.
    pub fn required_orders(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (orders, _) in self.terms() {
            if orders.iter().all(|&o| o == 0) {
                continue;
            }
            if !out.contains(orders) {
                out.push(orders.clone());
            }
        }
        out
    }

    /// Residual at one point from derivative values (aligned with
    /// [`PdeForm::required_orders`]), the solution value and the source.
    pub fn residual_at(&self, derivs: &[f64], u: f64, f: f64) -> f64 {
        let orders = self.required_orders();
        debug_assert_eq!(orders.len(), derivs.len());
        let mut acc = 0.0;
        for (multi, coef) in self.terms() {
            if multi.iter().all(|&o| o == 0) {
                acc += coef * u;
            } else {
                let k = orders.iter().position(|o| o == multi).unwrap();
                acc += coef * derivs[k];
            }
        }
        if self.has_reaction() {
            acc += u * (u * u - 1.0);
        }
        acc - f
    }
}

/// Benchmark equation: operator composition, manufactured exact solution,
/// derived source and boundary-face rule.
#[derive(Clone)]
pub struct PdeProblem {
    pub name: String,
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
    pub form: PdeForm,
    pub exact: PointFn,
    pub source: PointFn,
    pub boundary_rule: BoundaryRule,
}

impl std::fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PdeProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("bounds", &self.bounds)
            .field("form", &self.form)
            .field("boundary_rule", &self.boundary_rule)
            .finish()
    }
}

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

fn poisson_1d(name: &str, exact: PointFn, source: PointFn, hi: f64) -> PdeProblem {
    PdeProblem {
        name: name.to_string(),
        dim: 1,
        bounds: vec![(0.0, hi)],
        form: PdeForm::Linear {
            terms: vec![(vec![2], 1.0)],
        },
        exact,
        source,
        boundary_rule: BoundaryRule::AllFaces,
    }
}

fn allencahn_1d(name: &str, exact: PointFn, source: PointFn) -> PdeProblem {
    PdeProblem {
        name: name.to_string(),
        dim: 1,
        bounds: vec![(0.0, TWO_PI)],
        form: PdeForm::AllenCahn {
            terms: vec![(vec![2], 1.0)],
        },
        exact,
        source,
        boundary_rule: BoundaryRule::AllFaces,
    }
}

/// Builds a problem by id. Reference ids follow the benchmark tables
/// (`poisson1d_u1` ... `advection1d`); desk-scale ids carry the frequency in
/// the name, for example `poisson1d_sin_k20`, `poisson1d_mix_k20`,
/// `poisson2d_sin_k4`, `allencahn1d_sin_k20`, `advection1d_c5`.
pub fn make_problem(id: &str) -> Result<PdeProblem> {
    match id {
        "poisson1d_u1" => return poisson1d_sin(id, 100.0),
        "poisson1d_u2" => {
            let exact: PointFn = Arc::new(|x: &[f64]| {
                x[0].sin() + 0.1 * (20.0 * x[0]).sin() + 0.05 * (100.0 * x[0]).cos()
            });
            let source: PointFn = Arc::new(|x: &[f64]| {
                -x[0].sin() - 40.0 * (20.0 * x[0]).sin() - 500.0 * (100.0 * x[0]).cos()
            });
            return Ok(poisson_1d(id, exact, source, TWO_PI));
        }
        "poisson1d_u3" => {
            let exact: PointFn = Arc::new(|x: &[f64]| (6.0 * x[0]).sin() * (100.0 * x[0]).cos());
            let source: PointFn = Arc::new(|x: &[f64]| {
                -10036.0 * (6.0 * x[0]).sin() * (100.0 * x[0]).cos()
                    - 1200.0 * (6.0 * x[0]).cos() * (100.0 * x[0]).sin()
            });
            return Ok(poisson_1d(id, exact, source, TWO_PI));
        }
        "poisson1d_u4" => {
            let exact: PointFn = Arc::new(|x: &[f64]| x[0] * (200.0 * x[0]).sin());
            let source: PointFn = Arc::new(|x: &[f64]| {
                400.0 * (200.0 * x[0]).cos() - 40000.0 * x[0] * (200.0 * x[0]).sin()
            });
            return Ok(poisson_1d(id, exact, source, TWO_PI));
        }
        "poisson1d_u5" => {
            // Hybrid high-frequency plus quadratic, on [0, 1].
            let exact: PointFn =
                Arc::new(|x: &[f64]| (500.0 * x[0]).sin() - 2.0 * (x[0] - 0.5) * (x[0] - 0.5));
            let source: PointFn = Arc::new(|x: &[f64]| -250000.0 * (500.0 * x[0]).sin() - 4.0);
            return Ok(poisson_1d(id, exact, source, 1.0));
        }
        "poisson2d_u6" => return poisson2d_sin(id, 100.0),
        "poisson2d_u7" => {
            let part = |t: f64| (6.0 * t).sin() * (20.0 * t).sin();
            let part_dd = |t: f64| {
                -436.0 * (6.0 * t).sin() * (20.0 * t).sin()
                    + 240.0 * (6.0 * t).cos() * (20.0 * t).cos()
            };
            let exact: PointFn = Arc::new(move |x: &[f64]| part(x[0]) + part(x[1]));
            let source: PointFn = Arc::new(move |x: &[f64]| part_dd(x[0]) + part_dd(x[1]));
            return Ok(PdeProblem {
                name: id.to_string(),
                dim: 2,
                bounds: vec![(0.0, TWO_PI), (0.0, TWO_PI)],
                form: PdeForm::Linear {
                    terms: vec![(vec![2, 0], 1.0), (vec![0, 2], 1.0)],
                },
                exact,
                source,
                boundary_rule: BoundaryRule::AllFaces,
            });
        }
        "allencahn1d_u1" => return allencahn1d_sin(id, 100.0),
        "allencahn1d_u2" => {
            let exact: PointFn = Arc::new(|x: &[f64]| (6.0 * x[0]).sin() * (100.0 * x[0]).cos());
            let source: PointFn = Arc::new(move |x: &[f64]| {
                let u = (6.0 * x[0]).sin() * (100.0 * x[0]).cos();
                let uxx = -10036.0 * (6.0 * x[0]).sin() * (100.0 * x[0]).cos()
                    - 1200.0 * (6.0 * x[0]).cos() * (100.0 * x[0]).sin();
                uxx + u * (u * u - 1.0)
            });
            return Ok(allencahn_1d(id, exact, source));
        }
        "allencahn2d" => {
            let a = |t: f64| t.sin() + 0.1 * (20.0 * t).sin() + (100.0 * t).cos();
            let add = |t: f64| -t.sin() - 40.0 * (20.0 * t).sin() - 10000.0 * (100.0 * t).cos();
            let exact: PointFn = Arc::new(move |x: &[f64]| a(x[0]) * a(x[1]));
            let source: PointFn = Arc::new(move |x: &[f64]| {
                let u = a(x[0]) * a(x[1]);
                add(x[0]) * a(x[1]) + a(x[0]) * add(x[1]) + u * (u * u - 1.0)
            });
            return Ok(PdeProblem {
                name: id.to_string(),
                dim: 2,
                bounds: vec![(0.0, 1.0), (0.0, 1.0)],
                form: PdeForm::AllenCahn {
                    terms: vec![(vec![2, 0], 1.0), (vec![0, 2], 1.0)],
                },
                exact,
                source,
                boundary_rule: BoundaryRule::AllFaces,
            });
        }
        "advection1d" => return advection1d(id, 200.0),
        _ => {}
    }
    // Desk-scale variants with caller-supplied frequencies.
    if let Some(k) = parse_suffix(id, "poisson1d_sin_k") {
        return poisson1d_sin(id, k);
    }
    if let Some(k) = parse_suffix(id, "poisson1d_mix_k") {
        let exact: PointFn = Arc::new(move |x: &[f64]| x[0].sin() + 0.1 * (k * x[0]).sin());
        let source: PointFn =
            Arc::new(move |x: &[f64]| -x[0].sin() - 0.1 * k * k * (k * x[0]).sin());
        return Ok(poisson_1d(id, exact, source, TWO_PI));
    }
    if let Some(k) = parse_suffix(id, "poisson2d_sin_k") {
        return poisson2d_sin(id, k);
    }
    if let Some(k) = parse_suffix(id, "allencahn1d_sin_k") {
        return allencahn1d_sin(id, k);
    }
    if let Some(c) = parse_suffix(id, "advection1d_c") {
        return advection1d(id, c);
    }
    Err(GphmError::UnknownProblem(id.to_string()))
}

fn parse_suffix(id: &str, prefix: &str) -> Option<f64> {
    id.strip_prefix(prefix)?.parse().ok()
}

fn poisson1d_sin(id: &str, k: f64) -> Result<PdeProblem> {
    let exact: PointFn = Arc::new(move |x: &[f64]| (k * x[0]).sin());
    let source: PointFn = Arc::new(move |x: &[f64]| -k * k * (k * x[0]).sin());
    Ok(poisson_1d(id, exact, source, TWO_PI))
}

fn allencahn1d_sin(id: &str, k: f64) -> Result<PdeProblem> {
    let exact: PointFn = Arc::new(move |x: &[f64]| (k * x[0]).sin());
    let source: PointFn = Arc::new(move |x: &[f64]| {
        let u = (k * x[0]).sin();
        -k * k * u + u * (u * u - 1.0)
    });
    Ok(allencahn_1d(id, exact, source))
}

fn poisson2d_sin(id: &str, k: f64) -> Result<PdeProblem> {
    let exact: PointFn = Arc::new(move |x: &[f64]| (k * x[0]).sin() * (k * x[1]).sin());
    let source: PointFn =
        Arc::new(move |x: &[f64]| -2.0 * k * k * (k * x[0]).sin() * (k * x[1]).sin());
    Ok(PdeProblem {
        name: id.to_string(),
        dim: 2,
        bounds: vec![(0.0, TWO_PI), (0.0, TWO_PI)],
        form: PdeForm::Linear {
            terms: vec![(vec![2, 0], 1.0), (vec![0, 2], 1.0)],
        },
        exact,
        source,
        boundary_rule: BoundaryRule::AllFaces,
    })
}

fn advection1d(id: &str, c: f64) -> Result<PdeProblem> {
    // One-way wave u_t + c u_x = 0 on a space-time grid; dimension 0 is x,
    // dimension 1 is t. The exact solution transports sin(x).
    let exact: PointFn = Arc::new(move |x: &[f64]| (x[0] - c * x[1]).sin());
    let source: PointFn = Arc::new(|_: &[f64]| 0.0);
    Ok(PdeProblem {
        name: id.to_string(),
        dim: 2,
        bounds: vec![(0.0, TWO_PI), (0.0, 1.0)],
        form: PdeForm::Linear {
            terms: vec![(vec![1, 0], c), (vec![0, 1], 1.0)],
        },
        exact,
        source,
        boundary_rule: BoundaryRule::InitialPlusSpatial { time_dim: 1 },
    })
}

/// Reference problem ids at full benchmark scale.
pub fn paper_problem_ids() -> Vec<&'static str> {
    vec![
        "poisson1d_u1",
        "poisson1d_u2",
        "poisson1d_u3",
        "poisson1d_u4",
        "poisson1d_u5",
        "poisson2d_u6",
        "poisson2d_u7",
        "allencahn1d_u1",
        "allencahn1d_u2",
        "allencahn2d",
        "advection1d",
    ]
}

/// Fourth-order central difference of a 1-D restriction of `f` along `dim`.
fn fd_derivative(f: &PointFn, x: &[f64], dim: usize, order: usize, h: f64) -> f64 {
    let eval = |offset: f64| {
        let mut p = x.to_vec();
        p[dim] += offset;
        f(&p)
    };
    match order {
        1 => (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h),
        2 => {
            (-eval(-2.0 * h) + 16.0 * eval(-h) - 30.0 * eval(0.0) + 16.0 * eval(h)
                - eval(2.0 * h))
                / (12.0 * h * h)
        }
        _ => panic!("finite-difference harness supports orders 1 and 2"),
    }
}

/// Richardson-extrapolated derivative (sixth-order effective).
fn fd_derivative_rich(f: &PointFn, x: &[f64], dim: usize, order: usize, h: f64) -> f64 {
    let coarse = fd_derivative(f, x, dim, order, h);
    let fine = fd_derivative(f, x, dim, order, h / 2.0);
    (16.0 * fine - coarse) / 15.0
}

/// Evaluates the residual of the exact solution at random interior points
/// using finite differences of `exact`, returning the maximum absolute value.
/// Guards the hand-derived source terms.
pub fn verify_manufactured(problem: &PdeProblem, samples: usize, seed: u64) -> Result<f64> {
    let orders = problem.form.required_orders();
    for multi in &orders {
        if multi.iter().filter(|&&o| o > 0).count() != 1 {
            return Err(GphmError::Domain(format!(
                "finite-difference harness handles per-dimension derivatives only, got {multi:?}"
            )));
        }
    }
    let h = 2e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x: Vec<f64> = problem
            .bounds
            .iter()
            .map(|&(lo, hi)| {
                let margin = (hi - lo) * 0.02 + 4.0 * h;
                rng.gen_range(lo + margin..hi - margin)
            })
            .collect();
        let derivs: Vec<f64> = orders
            .iter()
            .map(|multi| {
                let dim = multi.iter().position(|&o| o > 0).unwrap();
                fd_derivative_rich(&problem.exact, &x, dim, multi[dim], h)
            })
            .collect();
        let u = (problem.exact)(&x);
        let f = (problem.source)(&x);
        worst = worst.max(problem.form.residual_at(&derivs, u, f).abs());
    }
    Ok(worst)
}

/// Relative L2 error `||pred - exact||_2 / ||exact||_2`.
pub fn relative_l2(predicted: &[f64], exact: &[f64]) -> Result<f64> {
    if predicted.len() != exact.len() {
        return Err(GphmError::Domain(format!(
            "relative_l2 length mismatch: {} vs {}",
            predicted.len(),
            exact.len()
        )));
    }
    let denom: f64 = exact.iter().map(|e| e * e).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(GphmError::Domain(
            "relative_l2: exact values are identically zero".into(),
        ));
    }
    let num: f64 = predicted
        .iter()
        .zip(exact.iter())
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}
