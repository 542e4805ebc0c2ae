//! Grid construction and the training objective.
//!
//! The solver estimates the solution values `U` on a tensor-product grid. The
//! negated weighted log joint probability combines the GP prior over
//! `vec(U)`, a boundary likelihood weighted by `lambda_b`, and an equation
//! likelihood on the PDE residual evaluated through conditional-mean
//! derivative predictions. All covariance algebra runs through the Kronecker
//! structure; the same tape program serves training, gradient verification
//! and the loss-value API.

use crate::autodiff::{FactorRef, ParamVector, Tape, Var};
use crate::error::{GphmError, Result};
use crate::kernels::{
    DisplacementTable, KernelJetTable, KernelKind, MixtureComponent, SpectralMixtureParams,
};
use crate::kron::{self, GramBundle, GridTensor};
use crate::pde::{BoundaryRule, PdeProblem, PointFn};
use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

/// Tensor-product collocation grid with uniform per-dimension nodes and the
/// boundary index set.
#[derive(Debug, Clone)]
pub struct Grid {
    pub nodes: Vec<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
    /// Boundary multi-indices, lexicographic order.
    pub boundary: Vec<Vec<usize>>,
    /// Row-major linear indices of the boundary points.
    pub boundary_flat: Vec<usize>,
}

impl Grid {
    /// Uniform grid including endpoints, with the boundary set given by the
    /// face rule. Sizes below 4 nodes per dimension are rejected.
    pub fn build(bounds: &[(f64, f64)], sizes: &[usize], rule: BoundaryRule) -> Result<Self> {
        if bounds.len() != sizes.len() || bounds.is_empty() {
            return Err(GphmError::Domain(
                "grid needs matching, non-empty bounds and sizes".into(),
            ));
        }
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(GphmError::Domain(format!(
                    "degenerate bounds for dimension {j}: [{lo}, {hi}]"
                )));
            }
            if sizes[j] < 4 {
                return Err(GphmError::Domain(format!(
                    "dimension {j}: at least 4 nodes required, got {}",
                    sizes[j]
                )));
            }
        }
        Ok(Self::from_nodes_unchecked(bounds, sizes, rule))
    }

    /// Grid for a problem: the problem's bounds and boundary rule.
    pub fn for_problem(problem: &PdeProblem, sizes: &[usize]) -> Result<Self> {
        if sizes.len() != problem.dim {
            return Err(GphmError::Domain(format!(
                "problem {} is {}-dimensional, got {} grid sizes",
                problem.name,
                problem.dim,
                sizes.len()
            )));
        }
        Self::build(&problem.bounds, sizes, problem.boundary_rule)
    }

    /// No size validation; used by small oracle tests.
    pub fn from_nodes_unchecked(
        bounds: &[(f64, f64)],
        sizes: &[usize],
        rule: BoundaryRule,
    ) -> Self {
        let nodes: Vec<Vec<f64>> = bounds
            .iter()
            .zip(sizes.iter())
            .map(|(&(lo, hi), &m)| {
                let h = (hi - lo) / (m - 1) as f64;
                let mut v: Vec<f64> = (0..m).map(|i| lo + i as f64 * h).collect();
                v[m - 1] = hi;
                v
            })
            .collect();
        let shape: Vec<usize> = sizes.to_vec();
        let mut boundary = Vec::new();
        let mut boundary_flat = Vec::new();
        let total: usize = shape.iter().product();
        let mut multi = vec![0usize; shape.len()];
        for flat in 0..total {
            let on_boundary = match rule {
                BoundaryRule::AllFaces => multi
                    .iter()
                    .zip(shape.iter())
                    .any(|(&i, &m)| i == 0 || i == m - 1),
                BoundaryRule::InitialPlusSpatial { time_dim } => {
                    multi.iter().zip(shape.iter()).enumerate().any(
                        |(j, (&i, &m))| {
                            if j == time_dim {
                                i == 0
                            } else {
                                i == 0 || i == m - 1
                            }
                        },
                    )
                }
            };
            if on_boundary {
                boundary.push(multi.clone());
                boundary_flat.push(flat);
            }
            // Advance the row-major multi-index.
            for j in (0..shape.len()).rev() {
                multi[j] += 1;
                if multi[j] < shape[j] {
                    break;
                }
                multi[j] = 0;
            }
        }
        Self {
            nodes,
            bounds: bounds.to_vec(),
            boundary,
            boundary_flat,
        }
    }

    pub fn ndim(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.nodes.iter().map(Vec::len).collect()
    }

    pub fn total_points(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn point(&self, multi: &[usize]) -> Vec<f64> {
        multi
            .iter()
            .zip(self.nodes.iter())
            .map(|(&i, nodes)| nodes[i])
            .collect()
    }

    /// Evaluates a closed-form field at every grid point, row-major.
    pub fn evaluate(&self, f: &PointFn) -> GridTensor {
        let shape = self.shape();
        let total = self.total_points();
        let mut values = Vec::with_capacity(total);
        let mut multi = vec![0usize; shape.len()];
        for _ in 0..total {
            values.push(f(&self.point(&multi)));
            for j in (0..shape.len()).rev() {
                multi[j] += 1;
                if multi[j] < shape[j] {
                    break;
                }
                multi[j] = 0;
            }
        }
        ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap()
    }
}

/// Uniform all-faces Dirichlet grid.
pub fn build_grid(bounds: &[(f64, f64)], sizes: &[usize]) -> Result<Grid> {
    Grid::build(bounds, sizes, BoundaryRule::AllFaces)
}

/// Dirichlet data at the grid's boundary multi-indices, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub values: Vec<f64>,
}

impl BoundaryData {
    pub fn from_exact(grid: &Grid, exact: &PointFn) -> Self {
        let values = grid
            .boundary
            .iter()
            .map(|multi| exact(&grid.point(multi)))
            .collect();
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Trainable model state: the solution tensor plus per-dimension kernel
/// parameters and the log likelihood precisions.
#[derive(Debug, Clone)]
pub struct SolutionState {
    pub u: GridTensor,
    pub kernel_params: Vec<SpectralMixtureParams>,
    pub log_tau1: f64,
    pub log_tau2: f64,
}

impl SolutionState {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.u.shape() != grid.shape().as_slice() {
            return Err(GphmError::Domain(format!(
                "solution shape {:?} does not match grid {:?}",
                self.u.shape(),
                grid.shape()
            )));
        }
        if self.kernel_params.len() != grid.ndim() {
            return Err(GphmError::Domain(
                "one kernel parameter set per dimension required".into(),
            ));
        }
        for p in &self.kernel_params {
            p.validate()?;
        }
        if !(self.log_tau1.is_finite() && self.log_tau2.is_finite()) {
            return Err(GphmError::NonFiniteInput("log precisions".into()));
        }
        Ok(())
    }

    /// Flattens into the stable parameter ordering: `vec(U)` row-major, then
    /// per dimension all log-weights, all frequencies, all log-length-scales,
    /// then `log_tau1`, `log_tau2`.
    pub fn to_params(&self) -> ParamVector {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in self.u.iter().enumerate() {
            names.push(format!("u[{i}]"));
            values.push(v);
        }
        for (j, p) in self.kernel_params.iter().enumerate() {
            for (q, c) in p.components.iter().enumerate() {
                names.push(format!("k{j}.log_w[{q}]"));
                values.push(c.log_weight);
            }
            for (q, c) in p.components.iter().enumerate() {
                names.push(format!("k{j}.mu[{q}]"));
                values.push(c.frequency);
            }
            for (q, c) in p.components.iter().enumerate() {
                names.push(format!("k{j}.log_rho[{q}]"));
                values.push(c.log_lengthscale);
            }
        }
        names.push("log_tau1".into());
        values.push(self.log_tau1);
        names.push("log_tau2".into());
        values.push(self.log_tau2);
        ParamVector::new(names, values)
    }

    /// Rebuilds a state with this one's shape/kinds from flat values.
    pub fn from_params(&self, params: &ParamVector) -> SolutionState {
        let values = params.values();
        let m = self.u.len();
        let mut pos = 0;
        let u = ArrayD::from_shape_vec(self.u.raw_dim(), values[pos..pos + m].to_vec()).unwrap();
        pos += m;
        let mut kernel_params = Vec::with_capacity(self.kernel_params.len());
        for p in &self.kernel_params {
            let q = p.components.len();
            let (logw, mu, logrho) = (
                &values[pos..pos + q],
                &values[pos + q..pos + 2 * q],
                &values[pos + 2 * q..pos + 3 * q],
            );
            pos += 3 * q;
            let components = (0..q)
                .map(|i| MixtureComponent::new(logw[i], mu[i], logrho[i]))
                .collect();
            kernel_params.push(SpectralMixtureParams {
                kind: p.kind,
                components,
            });
        }
        let log_tau1 = values[pos];
        let log_tau2 = values[pos + 1];
        SolutionState {
            u,
            kernel_params,
            log_tau1,
            log_tau2,
        }
    }
}

/// Builds the per-dimension Gram bundle for a state, including the derivative
/// Grams needed for `max_order` per dimension.
pub fn build_bundle(state: &SolutionState, grid: &Grid, orders: &[Vec<usize>]) -> Result<GramBundle> {
    let d = grid.ndim();
    let mut need = vec![0usize; d];
    for multi in orders {
        for (j, &o) in multi.iter().enumerate() {
            if o > 2 {
                return Err(GphmError::UnsupportedOrder { order: o });
            }
            need[j] = need[j].max(o);
        }
    }
    let mut parts = Vec::with_capacity(d);
    for j in 0..d {
        let p = &state.kernel_params[j];
        let nodes = &grid.nodes[j];
        let gram = p.gram(nodes, 0)?;
        let d1 = if need[j] >= 1 {
            Some(p.gram(nodes, 1)?)
        } else {
            None
        };
        let d2 = if need[j] >= 2 {
            Some(p.gram(nodes, 2)?)
        } else {
            None
        };
        parts.push((gram, d1, d2));
    }
    GramBundle::with_derivatives_floor(parts, kron::TRAIN_JITTER_REL)
}

/// Conditional-mean prediction of the requested mixed derivatives at every
/// grid point. The all-zero multi-order returns `U` itself.
pub fn predict_derivatives(
    state: &SolutionState,
    grid: &Grid,
    orders: &[Vec<usize>],
) -> Result<Vec<(Vec<usize>, GridTensor)>> {
    state.validate(grid)?;
    let bundle = build_bundle(state, grid, orders)?;
    let mut out = Vec::with_capacity(orders.len());
    for multi in orders {
        if multi.len() != grid.ndim() {
            return Err(GphmError::Domain(format!(
                "multi-order {multi:?} does not match grid rank {}",
                grid.ndim()
            )));
        }
        if multi.iter().all(|&o| o == 0) {
            out.push((multi.clone(), state.u.clone()));
            continue;
        }
        let dim_orders: Vec<(usize, usize)> =
            multi.iter().enumerate().map(|(j, &o)| (j, o)).collect();
        let ops = kron::derivative_operator(&bundle, &dim_orders)?;
        let op_views: Vec<(usize, ndarray::ArrayView2<f64>)> =
            ops.iter().map(|(j, a)| (*j, a.view())).collect();
        let pred = kron::mode_apply(&state.u, &op_views)?;
        out.push((multi.clone(), pred));
    }
    Ok(out)
}

/// Conditional-mean prediction at off-grid query points.
pub fn predict_offgrid(
    state: &SolutionState,
    grid: &Grid,
    queries: &[Vec<f64>],
) -> Result<Vec<f64>> {
    state.validate(grid)?;
    for q in queries {
        if q.len() != grid.ndim() {
            return Err(GphmError::Domain("query rank mismatch".into()));
        }
        for (j, (&x, &(lo, hi))) in q.iter().zip(grid.bounds.iter()).enumerate() {
            let pad = 1e-9 * (hi - lo).abs();
            if !(x >= lo - pad && x <= hi + pad) {
                return Err(GphmError::Domain(format!(
                    "query coordinate {x} outside bounds [{lo}, {hi}] in dimension {j}"
                )));
            }
        }
    }
    let bundle = build_bundle(state, grid, &[])?;
    // Weights W = C^{-1} vec(U) shared across queries.
    let w = kron::kron_solve(&bundle, &state.u)?;
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        // Contract W with the per-dimension cross-covariance rows.
        let mut t = w.clone();
        for j in 0..grid.ndim() {
            let p = &state.kernel_params[j];
            let row: Vec<f64> = grid.nodes[j]
                .iter()
                .map(|&h| p.value(q[j] - h))
                .collect::<Result<_>>()?;
            let rowm = ndarray::Array2::from_shape_vec((1, row.len()), row).unwrap();
            t = kron::mode_matmul(rowm.view(), &t, j)?;
        }
        debug_assert_eq!(t.len(), 1);
        out.push(t.iter().next().copied().unwrap());
    }
    Ok(out)
}

/// Everything fixed about one training objective: problem, grid, boundary
/// data, weighting, and the precomputed displacement tables and source field.
pub struct ObjectiveContext {
    pub grid: Grid,
    pub problem: PdeProblem,
    pub boundary: BoundaryData,
    pub lambda_b: f64,
    pub kind: KernelKind,
    pub q: usize,
    tables: Vec<Rc<DisplacementTable>>,
    f_tensor: GridTensor,
    boundary_idx: Rc<Vec<usize>>,
    pub param_template: SolutionState,
}

/// Tape handles produced by one objective build.
pub struct BuiltObjective {
    pub loss: Var,
    pub leaves: Vec<(Var, Range<usize>)>,
    pub boundary_sq: Var,
    pub residual_sq: Var,
}

impl ObjectiveContext {
    /// `template` supplies the kernel kind and component count per dimension.
    pub fn new(
        grid: Grid,
        problem: PdeProblem,
        boundary: BoundaryData,
        lambda_b: f64,
        template: SolutionState,
    ) -> Result<Self> {
        template.validate(&grid)?;
        if boundary.len() != grid.boundary.len() {
            return Err(GphmError::Domain(format!(
                "boundary data length {} does not match |B| = {}",
                boundary.len(),
                grid.boundary.len()
            )));
        }
        if !(lambda_b > 0.0 && lambda_b.is_finite()) {
            return Err(GphmError::Domain("lambda_b must be positive".into()));
        }
        let tables = grid
            .nodes
            .iter()
            .map(|n| Rc::new(DisplacementTable::new(n)))
            .collect();
        let f_tensor = grid.evaluate(&problem.source);
        let boundary_idx = Rc::new(grid.boundary_flat.clone());
        let kind = template.kernel_params[0].kind;
        let q = template.kernel_params[0].components.len();
        Ok(Self {
            grid,
            problem,
            boundary,
            lambda_b,
            kind,
            q,
            tables,
            f_tensor,
            boundary_idx,
            param_template: template,
        })
    }

    pub fn param_count(&self) -> usize {
        self.grid.total_points() + 3 * self.q * self.grid.ndim() + 2
    }

    /// Assembles the negated weighted log joint on the tape.
    ///
    /// Loss = -[ -1/2 log|C| - 1/2 vec(U)^T C^{-1} vec(U)
    ///           + lambda_b (N_b/2 log tau1 - tau1/2 ||u_b - g||^2)
    ///           + M/2 log tau2 - tau2/2 ||vec(H)||^2 ],
    /// constants dropped, jittered matrices used consistently in both prior
    /// terms.
    pub fn build(&self, tape: &mut Tape, values: &[f64]) -> Result<BuiltObjective> {
        let d = self.grid.ndim();
        let shape = self.grid.shape();
        let m: usize = shape.iter().product();
        let n_b = self.boundary.len();

        // Leaves in parameter order.
        let mut pos = 0;
        let u = tape.leaf(ArrayD::from_shape_vec(IxDyn(&shape), values[..m].to_vec()).unwrap())?;
        let u_range = 0..m;
        pos += m;
        let mut kern_leaves = Vec::with_capacity(d);
        let mut kern_ranges = Vec::with_capacity(d);
        for _ in 0..d {
            let q = self.q;
            let logw = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[q]), values[pos..pos + q].to_vec()).unwrap(),
            )?;
            let mu = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[q]), values[pos + q..pos + 2 * q].to_vec())
                    .unwrap(),
            )?;
            let logrho = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[q]), values[pos + 2 * q..pos + 3 * q].to_vec())
                    .unwrap(),
            )?;
            kern_leaves.push((logw, mu, logrho));
            kern_ranges.push((
                pos..pos + q,
                pos + q..pos + 2 * q,
                pos + 2 * q..pos + 3 * q,
            ));
            pos += 3 * q;
        }
        let lt1 = tape.leaf_scalar(values[pos])?;
        let lt2 = tape.leaf_scalar(values[pos + 1])?;
        let lt1_range = pos..pos + 1;
        let lt2_range = pos + 1..pos + 2;

        // Per-dimension kernel jets, Gram matrices and factors.
        let mut factors: Vec<FactorRef> = Vec::with_capacity(d);
        let mut jet_tables: Vec<Rc<KernelJetTable>> = Vec::with_capacity(d);
        let mut logdet_total: Option<Var> = None;
        for j in 0..d {
            let (logw, mu, logrho) = kern_leaves[j];
            let comps: Vec<MixtureComponent> = (0..self.q)
                .map(|i| {
                    MixtureComponent::new(
                        tape.value(logw)[[i]],
                        tape.value(mu)[[i]],
                        tape.value(logrho)[[i]],
                    )
                })
                .collect();
            let jets = Rc::new(KernelJetTable::compute_rc(
                self.kind,
                &comps,
                Rc::clone(&self.tables[j]),
            ));
            let c = tape.kernel_gram(logw, mu, logrho, Rc::clone(&jets), 0)?;
            let f = tape.spd_factor(c, j, kron::TRAIN_JITTER_REL)?;
            let ld = tape.spd_logdet(&f)?;
            let weighted = tape.scale(ld, (m / shape[j]) as f64)?;
            logdet_total = Some(match logdet_total {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
            factors.push(f);
            jet_tables.push(jets);
        }
        let logdet = logdet_total.expect("at least one dimension");

        // Shared per-mode solves, memoized on (tensor node, mode).
        let mut solve_memo: HashMap<(Var, usize), Var> = HashMap::new();
        let mut solve = |tape: &mut Tape, t: Var, mode: usize| -> Result<Var> {
            if let Some(&v) = solve_memo.get(&(t, mode)) {
                return Ok(v);
            }
            let v = tape.spd_solve_mode(&factors[mode], t, mode)?;
            solve_memo.insert((t, mode), v);
            Ok(v)
        };

        // Prior quadratic form.
        let mut y = u;
        for j in 0..d {
            y = solve(tape, y, j)?;
        }
        let quad = tape.dot(u, y)?;

        // Derivative fields for the residual.
        let orders = self.problem.form.required_orders();
        let mut deriv_fields: Vec<Var> = Vec::with_capacity(orders.len());
        for multi in &orders {
            let mut t = u;
            for (j, &o) in multi.iter().enumerate() {
                if o == 0 {
                    continue;
                }
                t = solve(tape, t, j)?;
                let (logw, mu, logrho) = kern_leaves[j];
                let dgram =
                    tape.kernel_gram(logw, mu, logrho, Rc::clone(&jet_tables[j]), o)?;
                t = tape.mode_matmul(dgram, t, j)?;
            }
            deriv_fields.push(t);
        }

        // Residual H = sum coef * D_alpha (+ u(u^2-1)) - f.
        let mut h: Option<Var> = None;
        for (multi, coef) in self.problem.form.terms() {
            let term = if multi.iter().all(|&o| o == 0) {
                tape.scale(u, *coef)?
            } else {
                let k = orders.iter().position(|o| o == multi).unwrap();
                tape.scale(deriv_fields[k], *coef)?
            };
            h = Some(match h {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let mut h = h.expect("operator has at least one term");
        if self.problem.form.has_reaction() {
            let u2 = tape.mul(u, u)?;
            let u3 = tape.mul(u2, u)?;
            let reaction = tape.sub(u3, u)?;
            h = tape.add(h, reaction)?;
        }
        let f_const = tape.constant(self.f_tensor.clone())?;
        let h = tape.sub(h, f_const)?;
        let residual_sq = tape.sum_sq(h)?;

        // Boundary misfit.
        let u_b = tape.gather(u, Rc::clone(&self.boundary_idx))?;
        let g = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[n_b]), self.boundary.values.clone()).unwrap(),
        )?;
        let bdiff = tape.sub(u_b, g)?;
        let boundary_sq = tape.sum_sq(bdiff)?;

        // Weighted log joint, negated.
        let tau1 = tape.exp(lt1)?;
        let tau2 = tape.exp(lt2)?;
        let t1b = tape.mul(tau1, boundary_sq)?;
        let t2r = tape.mul(tau2, residual_sq)?;
        let mut log_joint = tape.scale(logdet, -0.5)?;
        let quad_term = tape.scale(quad, -0.5)?;
        log_joint = tape.add(log_joint, quad_term)?;
        let b_log = tape.scale(lt1, self.lambda_b * n_b as f64 / 2.0)?;
        log_joint = tape.add(log_joint, b_log)?;
        let b_fit = tape.scale(t1b, -self.lambda_b / 2.0)?;
        log_joint = tape.add(log_joint, b_fit)?;
        let r_log = tape.scale(lt2, m as f64 / 2.0)?;
        log_joint = tape.add(log_joint, r_log)?;
        let r_fit = tape.scale(t2r, -0.5)?;
        log_joint = tape.add(log_joint, r_fit)?;
        let loss = tape.scale(log_joint, -1.0)?;

        let mut leaves = vec![(u, u_range)];
        for (j, (logw, mu, logrho)) in kern_leaves.into_iter().enumerate() {
            let (rw, rm, rr) = kern_ranges[j].clone();
            leaves.push((logw, rw));
            leaves.push((mu, rm));
            leaves.push((logrho, rr));
        }
        leaves.push((lt1, lt1_range));
        leaves.push((lt2, lt2_range));

        Ok(BuiltObjective {
            loss,
            leaves,
            boundary_sq,
            residual_sq,
        })
    }

    /// Loss value at a state (convenience wrapper over the tape program).
    pub fn objective_value(&self, state: &SolutionState) -> Result<f64> {
        let params = state.to_params();
        let mut tape = Tape::new();
        let built = self.build(&mut tape, params.values())?;
        Ok(tape.scalar_value(built.loss))
    }
}

impl crate::autodiff::ScalarProgram for ObjectiveContext {
    fn build(&self, tape: &mut Tape, values: &[f64]) -> Result<(Var, Vec<(Var, Range<usize>)>)> {
        let built = ObjectiveContext::build(self, tape, values)?;
        Ok((built.loss, built.leaves))
    }
}
