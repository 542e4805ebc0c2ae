//! Taped reverse-mode gradients over the tensor-operation vocabulary used by
//! the training objective: mode products, triangular and SPD solves, Cholesky
//! factorization, kernel Gram assembly, elementwise maps and reductions.
//!
//! The tape records forward values at node creation; [`Tape::gradient`]
//! replays it in reverse. Evaluation is single-threaded with a fixed
//! accumulation order, so two gradient calls on identical inputs are bitwise
//! identical. Non-finite intermediates fail fast with the offending
//! operation's name.
//!
//! The Cholesky pullback is implemented directly (the Phi-sandwich on the
//! factor adjoint) and is verified end to end through [`gradcheck`] rather
//! than against a symbolic formula. The fused SPD solve and log-determinant
//! nodes share one factorization per matrix and push their input adjoints
//! straight to the Gram matrix, which keeps the per-iteration cost at one
//! O(n^3) factorization plus one O(n^3) inverse for the log-determinant term.

use crate::error::{GphmError, Result};
use crate::kernels::KernelJetTable;
use crate::kron::{self, GridTensor};
use crate::linalg;
use ndarray::{Array2, ArrayD, IxDyn};
use std::ops::Range;
use std::rc::Rc;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shared Cholesky factor for the fused SPD operations.
#[derive(Debug)]
pub struct SpdFactor {
    pub chol: Array2<f64>,
    pub jitter: f64,
}

/// Reference to a factorized SPD tape value.
#[derive(Clone)]
pub struct FactorRef {
    /// The symmetric matrix node the factor was computed from.
    pub matrix: Var,
    pub factor: Rc<SpdFactor>,
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product; either side may be a scalar.
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Transpose(Var),
    Reshape(Var),
    /// Flattened inner product of two same-shaped tensors.
    Dot(Var, Var),
    /// Squared Euclidean norm of all entries.
    SumSq(Var),
    /// Extracts flattened entries at fixed indices.
    Gather(Var, Rc<Vec<usize>>),
    ModeMatmul {
        a: Var,
        t: Var,
        mode: usize,
    },
    ModeTriSolve {
        l: Var,
        b: Var,
        mode: usize,
        transpose: bool,
    },
    /// Lower Cholesky factor of a symmetric matrix parent.
    Cholesky(Var),
    AddDiag(Var, #[allow(dead_code)] f64),
    /// log det from a Cholesky-factor parent.
    CholLogDet(Var),
    /// Fused `(C + jitter I)^{-1}` applied along one mode.
    SpdSolveMode {
        c: Var,
        b: Var,
        mode: usize,
        factor: Rc<SpdFactor>,
    },
    /// Fused log det of `C + jitter I`.
    SpdLogDet {
        c: Var,
        factor: Rc<SpdFactor>,
    },
    /// Mixture Gram matrix assembled from shared kernel jets; parents are the
    /// per-component log-weight, frequency and log-length-scale vectors.
    KernelGram {
        logw: Var,
        mu: Var,
        logrho: Var,
        jets: Rc<KernelJetTable>,
        order: usize,
    },
    /// Identity forward with a deliberately scaled adjoint; negative-control
    /// fixture for gradcheck tests.
    #[doc(hidden)]
    DebugScaleGrad(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Dot(..) => "dot",
            Op::SumSq(..) => "sum_sq",
            Op::Gather(..) => "gather",
            Op::ModeMatmul { .. } => "mode_matmul",
            Op::ModeTriSolve { .. } => "mode_tri_solve",
            Op::Cholesky(..) => "cholesky",
            Op::AddDiag(..) => "add_diag",
            Op::CholLogDet(..) => "chol_logdet",
            Op::SpdSolveMode { .. } => "spd_solve_mode",
            Op::SpdLogDet { .. } => "spd_logdet",
            Op::KernelGram { .. } => "kernel_gram",
            Op::DebugScaleGrad(..) => "debug_scale_grad",
        }
    }
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

/// Dynamic computation tape, rebuilt per objective evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::gradient`], queried per tape variable.
pub struct Gradients {
    adj: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Adjoint of the loss with respect to `v` (zeros if the variable did not
    /// influence the loss).
    pub fn wrt(&self, tape: &Tape, v: Var) -> ArrayD<f64> {
        match &self.adj[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.value(v).raw_dim()),
        }
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(GphmError::GradientNonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Result<Var> {
        self.leaf(scalar(v))
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise product. One side may be a scalar (broadcast).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let v = if va.len() == 1 && vb.len() != 1 {
            vb * *va.iter().next().unwrap()
        } else if vb.len() == 1 && va.len() != 1 {
            va * *vb.iter().next().unwrap()
        } else {
            va * vb
        };
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = as_matrix(self.value(a));
        self.push(
            Op::Transpose(a),
            v.t().as_standard_layout().to_owned().into_dyn(),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .clone()
            .into_shape(IxDyn(shape))
            .map_err(|e| GphmError::Domain(format!("reshape: {e}")))?;
        self.push(Op::Reshape(a), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a, b), scalar(s))
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        self.push(Op::SumSq(a), scalar(s))
    }

    pub fn gather(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let src = self.value(a);
        let flat = src.as_slice().expect("gather source must be contiguous");
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices.iter() {
            out.push(flat[i]);
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[indices.len()]), out).unwrap();
        self.push(Op::Gather(a, indices), v)
    }

    pub fn mode_matmul(&mut self, a: Var, t: Var, mode: usize) -> Result<Var> {
        let am = as_matrix(self.value(a));
        let v = kron::mode_matmul(am.view(), self.value(t), mode)?;
        self.push(Op::ModeMatmul { a, t, mode }, v)
    }

    pub fn mode_tri_solve(&mut self, l: Var, b: Var, mode: usize, transpose: bool) -> Result<Var> {
        let lm = as_matrix(self.value(l));
        let v = kron::mode_tri_solve(&lm.view(), self.value(b), mode, transpose)?;
        self.push(
            Op::ModeTriSolve {
                l,
                b,
                mode,
                transpose,
            },
            v,
        )
    }

    pub fn add_diag(&mut self, a: Var, jitter: f64) -> Result<Var> {
        let mut v = self.value(a).clone();
        let n = v.shape()[0];
        for i in 0..n {
            v[[i, i]] += jitter;
        }
        self.push(Op::AddDiag(a, jitter), v)
    }

    /// Generic Cholesky node; errors if the matrix is not positive definite.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let mut l = as_matrix(self.value(a));
        linalg::cholesky_in_place(&mut l)
            .map_err(|p| GphmError::Domain(format!("cholesky node: matrix not PD at pivot {p}")))?;
        self.push(Op::Cholesky(a), l.into_dyn())
    }

    pub fn chol_logdet(&mut self, l: Var) -> Result<Var> {
        let lm = as_matrix(self.value(l));
        let v = linalg::logdet_from_chol(&lm.view());
        self.push(Op::CholLogDet(l), scalar(v))
    }

    /// Factorizes the symmetric matrix node through the jitter ladder (with
    /// an always-on floor of `floor_rel * max(mean diag, 1)`) and returns a
    /// handle shared by the fused SPD operations.
    pub fn spd_factor(&mut self, c: Var, dim: usize, floor_rel: f64) -> Result<FactorRef> {
        let cm = as_matrix(self.value(c));
        let (chol, jitter) = kron::cholesky_with_floor(&cm, dim, floor_rel)?;
        Ok(FactorRef {
            matrix: c,
            factor: Rc::new(SpdFactor { chol, jitter }),
        })
    }

    /// `(C + jitter I)^{-1}` applied along `mode` of the tensor `b`.
    pub fn spd_solve_mode(&mut self, f: &FactorRef, b: Var, mode: usize) -> Result<Var> {
        let y = spd_solve_mode_raw(&f.factor, self.value(b), mode)?;
        self.push(
            Op::SpdSolveMode {
                c: f.matrix,
                b,
                mode,
                factor: Rc::clone(&f.factor),
            },
            y,
        )
    }

    /// `log|C + jitter I|` through the shared factor.
    pub fn spd_logdet(&mut self, f: &FactorRef) -> Result<Var> {
        let v = linalg::logdet_from_chol(&f.factor.chol.view());
        self.push(
            Op::SpdLogDet {
                c: f.matrix,
                factor: Rc::clone(&f.factor),
            },
            scalar(v),
        )
    }

    /// Gram matrix of the given derivative order assembled from shared kernel
    /// jets. Parents are `[Q]`-shaped parameter vectors.
    pub fn kernel_gram(
        &mut self,
        logw: Var,
        mu: Var,
        logrho: Var,
        jets: Rc<KernelJetTable>,
        order: usize,
    ) -> Result<Var> {
        if order > 2 {
            return Err(GphmError::UnsupportedOrder { order });
        }
        let v = jets.fill(order).into_dyn();
        self.push(
            Op::KernelGram {
                logw,
                mu,
                logrho,
                jets,
                order,
            },
            v,
        )
    }

    #[doc(hidden)]
    pub fn debug_scale_grad(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).clone();
        self.push(Op::DebugScaleGrad(a, factor), v)
    }

    /// Reverse pass from a scalar loss node.
    pub fn gradient(&self, loss: Var) -> Result<Gradients> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut adj: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(out_bar) = adj[i].take() else {
                continue;
            };
            self.backward_one(&self.nodes[i], &out_bar, &mut adj)?;
            adj[i] = Some(out_bar);
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, adj: &mut [Option<ArrayD<f64>>], target: Var, contribution: ArrayD<f64>) {
        match &mut adj[target.0] {
            Some(existing) => *existing += &contribution,
            slot @ None => {
                // Keep every stored adjoint in standard layout; matmul can
                // hand back F-order arrays for rank-1 shapes.
                let c = if contribution.as_slice().is_some() {
                    contribution
                } else {
                    contribution.as_standard_layout().into_owned()
                };
                *slot = Some(c);
            }
        }
    }

    fn backward_one(
        &self,
        node: &Node,
        out_bar: &ArrayD<f64>,
        adj: &mut Vec<Option<ArrayD<f64>>>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, out_bar.clone());
                self.accumulate(adj, *b, out_bar.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, out_bar.clone());
                self.accumulate(adj, *b, -out_bar);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.len() == 1 && vb.len() != 1 {
                    let s: f64 = out_bar.iter().zip(vb.iter()).map(|(x, y)| x * y).sum();
                    self.accumulate(adj, *a, scalar(s));
                    self.accumulate(adj, *b, out_bar * *va.iter().next().unwrap());
                } else if vb.len() == 1 && va.len() != 1 {
                    let s: f64 = out_bar.iter().zip(va.iter()).map(|(x, y)| x * y).sum();
                    self.accumulate(adj, *b, scalar(s));
                    self.accumulate(adj, *a, out_bar * *vb.iter().next().unwrap());
                } else {
                    self.accumulate(adj, *a, out_bar * vb);
                    self.accumulate(adj, *b, out_bar * va);
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, out_bar * *c),
            Op::Exp(a) => self.accumulate(adj, *a, out_bar * &node.value),
            Op::Transpose(a) => {
                let m = as_matrix(out_bar);
                self.accumulate(
                    adj,
                    *a,
                    m.t().as_standard_layout().to_owned().into_dyn(),
                );
            }
            Op::Reshape(a) => {
                let back = out_bar
                    .clone()
                    .into_shape(self.value(*a).raw_dim())
                    .expect("reshape adjoint");
                self.accumulate(adj, *a, back);
            }
            Op::Dot(a, b) => {
                let s = out_bar.iter().next().copied().unwrap();
                self.accumulate(adj, *a, self.value(*b) * s);
                self.accumulate(adj, *b, self.value(*a) * s);
            }
            Op::SumSq(a) => {
                let s = out_bar.iter().next().copied().unwrap();
                self.accumulate(adj, *a, self.value(*a) * (2.0 * s));
            }
            Op::Gather(a, indices) => {
                let mut g = ArrayD::zeros(self.value(*a).raw_dim());
                {
                    let gs = g.as_slice_mut().unwrap();
                    for (k, &i) in indices.iter().enumerate() {
                        gs[i] += out_bar[[k]];
                    }
                }
                self.accumulate(adj, *a, g);
            }
            Op::ModeMatmul { a, t, mode } => {
                let am = as_matrix(self.value(*a));
                let tbar = kron::mode_matmul(am.t(), out_bar, *mode)?;
                self.accumulate(adj, *t, tbar);
                let yb = kron::unfold(out_bar, *mode);
                let tu = kron::unfold(self.value(*t), *mode);
                let abar = yb.dot(&tu.t());
                self.accumulate(adj, *a, abar.into_dyn());
            }
            Op::ModeTriSolve {
                l,
                b,
                mode,
                transpose,
            } => {
                let lm = as_matrix(self.value(*l));
                // b_bar = op(L)^{-T} out_bar.
                let w = kron::mode_tri_solve(&lm.view(), out_bar, *mode, !transpose)?;
                // L_bar = tril(-(W X^T)) for op(L) = L, tril(-(X W^T)) for L^T.
                let xu = kron::unfold(&node.value, *mode);
                let wu = kron::unfold(&w, *mode);
                let mut lbar = if !*transpose {
                    wu.dot(&xu.t())
                } else {
                    xu.dot(&wu.t())
                };
                lbar.mapv_inplace(|x| -x);
                let n = lbar.nrows();
                for r in 0..n {
                    for c in r + 1..n {
                        lbar[[r, c]] = 0.0;
                    }
                }
                self.accumulate(adj, *l, lbar.into_dyn());
                self.accumulate(adj, *b, w);
            }
            Op::Cholesky(a) => {
                let lm = as_matrix(&node.value);
                let lbar = as_matrix(out_bar);
                let cbar = linalg::cholesky_adjoint(&lm.view(), &lbar);
                self.accumulate(adj, *a, cbar.into_dyn());
            }
            Op::AddDiag(a, _) => self.accumulate(adj, *a, out_bar.clone()),
            Op::CholLogDet(l) => {
                let s = out_bar.iter().next().copied().unwrap();
                let lm = self.value(*l);
                let n = lm.shape()[0];
                let mut lbar = ArrayD::zeros(lm.raw_dim());
                for i in 0..n {
                    lbar[[i, i]] = 2.0 * s / lm[[i, i]];
                }
                self.accumulate(adj, *l, lbar);
            }
            Op::SpdSolveMode {
                c, b, mode, factor, ..
            } => {
                let w = spd_solve_mode_raw(factor, out_bar, *mode)?;
                // C_bar = -(C^{-1} out_bar) y^T in mode-unfolded space.
                let wu = kron::unfold(&w, *mode);
                let yu = kron::unfold(&node.value, *mode);
                let mut cbar = wu.dot(&yu.t());
                cbar.mapv_inplace(|x| -x);
                self.accumulate(adj, *c, cbar.into_dyn());
                self.accumulate(adj, *b, w);
            }
            Op::SpdLogDet { c, factor } => {
                let s = out_bar.iter().next().copied().unwrap();
                let inv = linalg::spd_inverse_from_chol(&factor.chol.view());
                self.accumulate(adj, *c, (inv * s).into_dyn());
            }
            Op::KernelGram {
                logw,
                mu,
                logrho,
                jets,
                order,
            } => {
                let gbar = as_matrix(out_bar);
                let (dw, dmu, drho) = jets.contract_adjoint(*order, &gbar);
                let q = dw.len();
                let to_arr = |v: Vec<f64>| ArrayD::from_shape_vec(IxDyn(&[q]), v).unwrap();
                self.accumulate(adj, *logw, to_arr(dw));
                self.accumulate(adj, *mu, to_arr(dmu));
                self.accumulate(adj, *logrho, to_arr(drho));
            }
            Op::DebugScaleGrad(a, factor) => {
                self.accumulate(adj, *a, out_bar * *factor);
            }
        }
        Ok(())
    }
}

fn as_matrix(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a rank-2 value")
        .to_owned()
}

fn spd_solve_mode_raw(factor: &SpdFactor, t: &GridTensor, mode: usize) -> Result<GridTensor> {
    let y = kron::mode_tri_solve(&factor.chol.view(), t, mode, false)?;
    kron::mode_tri_solve(&factor.chol.view(), &y, mode, true)
}

// ---------------------------------------------------------------------------
// Parameter vectors and the verification harness.
// ---------------------------------------------------------------------------

/// Flat, stably ordered list of named scalar parameters. Round-trips
/// losslessly to and from structured model state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Self {
        assert_eq!(names.len(), values.len());
        debug_assert!(
            {
                let mut sorted = names.clone();
                sorted.sort();
                sorted.windows(2).all(|w| w[0] != w[1])
            },
            "parameter names must be unique"
        );
        Self { names, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().copied())
    }

    /// Same names, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        Self::new(self.names.clone(), values)
    }
}

/// A differentiable scalar program: given leaf values, builds the tape and
/// returns the loss node plus the leaf nodes with the parameter ranges they
/// cover (row-major within each leaf).
pub trait ScalarProgram {
    fn build(&self, tape: &mut Tape, values: &[f64]) -> Result<(Var, Vec<(Var, Range<usize>)>)>;
}

impl<F> ScalarProgram for F
where
    F: Fn(&mut Tape, &[f64]) -> Result<(Var, Vec<(Var, Range<usize>)>)>,
{
    fn build(&self, tape: &mut Tape, values: &[f64]) -> Result<(Var, Vec<(Var, Range<usize>)>)> {
        self(tape, values)
    }
}

/// Evaluates the program's value only.
pub fn evaluate<P: ScalarProgram>(prog: &P, params: &ParamVector) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = prog.build(&mut tape, params.values())?;
    Ok(tape.scalar_value(loss))
}

/// Reverse-mode gradient of the program with respect to every parameter.
pub fn gradient<P: ScalarProgram>(prog: &P, params: &ParamVector) -> Result<(f64, ParamVector)> {
    let mut tape = Tape::new();
    let (loss, leaves) = prog.build(&mut tape, params.values())?;
    let value = tape.scalar_value(loss);
    let grads = tape.gradient(loss)?;
    let mut out = vec![0.0; params.len()];
    for (var, range) in leaves {
        let g = grads.wrt(&tape, var);
        assert_eq!(g.len(), range.len(), "leaf range does not match leaf size");
        for (slot, gv) in out[range].iter_mut().zip(g.iter()) {
            *slot += gv;
        }
    }
    Ok((value, params.with_values(out)))
}

/// One row of a [`GradcheckReport`].
#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub abs_error: f64,
}

/// Per-parameter comparison of reverse-mode gradients against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub passed: bool,
    pub tolerance: f64,
    pub abs_floor: f64,
}

/// Runs the finite-difference harness: central differences with per-parameter
/// step `step * max(1, |p|)`; a parameter passes if its relative error is
/// below `tolerance` or its absolute error is below `abs_floor`.
pub fn gradcheck<P: ScalarProgram>(
    prog: &P,
    params: &ParamVector,
    step: f64,
    tolerance: f64,
    abs_floor: f64,
) -> Result<GradcheckReport> {
    let (_, analytic) = gradient(prog, params)?;
    let mut entries = Vec::with_capacity(params.len());
    let mut worst_rel = -1.0f64;
    let mut worst_param = String::new();
    let mut passed = true;
    let mut work = params.clone();
    for i in 0..params.len() {
        let p0 = params.values()[i];
        let h = step * p0.abs().max(1.0);
        work.values_mut()[i] = p0 + h;
        let up = evaluate(prog, &work)?;
        work.values_mut()[i] = p0 - h;
        let down = evaluate(prog, &work)?;
        work.values_mut()[i] = p0;
        let numeric = (up - down) / (2.0 * h);
        let analytic_i = analytic.values()[i];
        let abs_error = (analytic_i - numeric).abs();
        let rel_error = abs_error / analytic_i.abs().max(numeric.abs()).max(1e-300);
        let ok = rel_error < tolerance || abs_error < abs_floor;
        if !ok {
            passed = false;
        }
        // Track the worst entry that is not excused by the absolute floor.
        let effective = if abs_error < abs_floor { 0.0 } else { rel_error };
        if effective > worst_rel {
            worst_rel = effective;
            worst_param = params.names()[i].clone();
        }
        entries.push(GradcheckEntry {
            name: params.names()[i].clone(),
            analytic: analytic_i,
            numeric,
            rel_error,
            abs_error,
        });
    }
    Ok(GradcheckReport {
        entries,
        worst_rel_error: worst_rel.max(0.0),
        worst_param,
        passed,
        tolerance,
        abs_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{DisplacementTable, KernelKind, MixtureComponent};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn leaf_all(tape: &mut Tape, values: &[f64]) -> (Var, Vec<(Var, Range<usize>)>) {
        let v = tape
            .leaf(ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap())
            .unwrap();
        (v, vec![(v, 0..values.len())])
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum p_i^2 -> gradient 2p.
        let prog = |tape: &mut Tape, values: &[f64]| {
            let (v, leaves) = leaf_all(tape, values);
            let loss = tape.sum_sq(v)?;
            Ok((loss, leaves))
        };
        let params = ParamVector::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, -2.0, 0.5],
        );
        let (val, grad) = gradient(&prog, &params).unwrap();
        assert_relative_eq!(val, 5.25, max_relative = 1e-15);
        assert_eq!(grad.values(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn logdet_of_exp_theta_is_one() {
        // C = [exp(theta)] (1x1): log det = theta, d/dtheta = 1.
        let prog = |tape: &mut Tape, values: &[f64]| {
            let th = tape.leaf_scalar(values[0])?;
            let c_scalar = tape.exp(th)?;
            let one = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1]), 1.0))?;
            let c = tape.mul(c_scalar, one)?;
            let l = tape.cholesky(c)?;
            let ld = tape.chol_logdet(l)?;
            Ok((ld, vec![(th, 0..1)]))
        };
        let params = ParamVector::new(vec!["theta".into()], vec![0.7]);
        let (val, grad) = gradient(&prog, &params).unwrap();
        assert_relative_eq!(val, 0.7, max_relative = 1e-14);
        assert_relative_eq!(grad.values()[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn gradient_is_deterministic_bitwise() {
        let prog = |tape: &mut Tape, values: &[f64]| {
            let (v, leaves) = leaf_all(tape, values);
            let e = tape.exp(v)?;
            let s = tape.sum_sq(e)?;
            Ok((s, leaves))
        };
        let params = ParamVector::new(
            (0..8).map(|i| format!("p{i}")).collect(),
            (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect(),
        );
        let (v1, g1) = gradient(&prog, &params).unwrap();
        let (v2, g2) = gradient(&prog, &params).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gradient_is_linear() {
        let prog1 = |tape: &mut Tape, values: &[f64]| {
            let (v, leaves) = leaf_all(tape, values);
            let s = tape.sum_sq(v)?;
            Ok((s, leaves))
        };
        let prog2 = |tape: &mut Tape, values: &[f64]| {
            let (v, leaves) = leaf_all(tape, values);
            let e = tape.exp(v)?;
            let c = tape.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0))?;
            let d = tape.dot(e, c)?;
            Ok((d, leaves))
        };
        let (a, b) = (2.5, -1.25);
        let combined = |tape: &mut Tape, values: &[f64]| {
            let (v, leaves) = leaf_all(tape, values);
            let s = tape.sum_sq(v)?;
            let e = tape.exp(v)?;
            let cst = tape.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0))?;
            let d = tape.dot(e, cst)?;
            let sa = tape.scale(s, a)?;
            let db = tape.scale(d, b)?;
            let loss = tape.add(sa, db)?;
            Ok((loss, leaves))
        };
        let params = ParamVector::new(
            vec!["x".into(), "y".into(), "z".into()],
            vec![0.3, -0.7, 1.1],
        );
        let (_, g1) = gradient(&prog1, &params).unwrap();
        let (_, g2) = gradient(&prog2, &params).unwrap();
        let (_, gc) = gradient(&combined, &params).unwrap();
        for i in 0..3 {
            let expect = a * g1.values()[i] + b * g2.values()[i];
            assert!((gc.values()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_solve_pipeline_passes_gradcheck() {
        // loss = logdet(C) + b^T C^{-1} b with C = sym(A) + n I, exercising
        // transpose, add_diag, cholesky, triangular solves, dot.
        let n = 5;
        let prog = move |tape: &mut Tape, values: &[f64]| {
            let a = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[n, n]), values[..n * n].to_vec()).unwrap(),
            )?;
            let rhs = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[n]), values[n * n..].to_vec()).unwrap(),
            )?;
            let at = tape.transpose(a)?;
            let sum = tape.add(a, at)?;
            let sym = tape.scale(sum, 0.5)?;
            let c = tape.add_diag(sym, n as f64)?;
            let l = tape.cholesky(c)?;
            let ld = tape.chol_logdet(l)?;
            let y = tape.mode_tri_solve(l, rhs, 0, false)?;
            let x = tape.mode_tri_solve(l, y, 0, true)?;
            let quad = tape.dot(rhs, x)?;
            let loss = tape.add(ld, quad)?;
            Ok((loss, vec![(a, 0..n * n), (rhs, n * n..n * n + n)]))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.6..0.6)).collect();
        vals.extend((0..n).map(|_| rng.gen_range(-1.0..1.0)));
        let names: Vec<String> = (0..vals.len()).map(|i| format!("p{i}")).collect();
        let params = ParamVector::new(names, vals);
        let report = gradcheck(&prog, &params, 1e-5, 1e-4, 1e-9).unwrap();
        assert!(
            report.passed,
            "worst {} at {}",
            report.worst_rel_error, report.worst_param
        );
    }

    fn mixture_program(
        fused: bool,
        table: Rc<DisplacementTable>,
        n: usize,
        q: usize,
    ) -> impl Fn(&mut Tape, &[f64]) -> Result<(Var, Vec<(Var, Range<usize>)>)> {
        move |tape: &mut Tape, values: &[f64]| {
            let logw =
                tape.leaf(ArrayD::from_shape_vec(IxDyn(&[q]), values[0..q].to_vec()).unwrap())?;
            let mu = tape
                .leaf(ArrayD::from_shape_vec(IxDyn(&[q]), values[q..2 * q].to_vec()).unwrap())?;
            let logrho = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[q]), values[2 * q..3 * q].to_vec()).unwrap(),
            )?;
            let u = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[n]), values[3 * q..3 * q + n].to_vec()).unwrap(),
            )?;
            let comps: Vec<MixtureComponent> = (0..q)
                .map(|i| MixtureComponent::new(values[i], values[q + i], values[2 * q + i]))
                .collect();
            let jets = Rc::new(crate::kernels::KernelJetTable::compute_rc(
                KernelKind::StM,
                &comps,
                Rc::clone(&table),
            ));
            let c = tape.kernel_gram(logw, mu, logrho, jets, 0)?;
            let (ld, y) = if fused {
                let f = tape.spd_factor(c, 0, 0.0)?;
                let ld = tape.spd_logdet(&f)?;
                let y = tape.spd_solve_mode(&f, u, 0)?;
                (ld, y)
            } else {
                let cm = tape.value(c).clone();
                let cm2 = cm.into_dimensionality::<ndarray::Ix2>().unwrap();
                let (_, jitter) = kron::cholesky_with_jitter(&cm2, 0).unwrap();
                let cj = tape.add_diag(c, jitter)?;
                let l = tape.cholesky(cj)?;
                let ld = tape.chol_logdet(l)?;
                let t1 = tape.mode_tri_solve(l, u, 0, false)?;
                let y = tape.mode_tri_solve(l, t1, 0, true)?;
                (ld, y)
            };
            let quad = tape.dot(u, y)?;
            let loss = tape.add(ld, quad)?;
            Ok((
                loss,
                vec![
                    (logw, 0..q),
                    (mu, q..2 * q),
                    (logrho, 2 * q..3 * q),
                    (u, 3 * q..3 * q + n),
                ],
            ))
        }
    }

    #[test]
    fn spd_fused_ops_match_generic_composition_and_fd() {
        let n = 6;
        let q = 2;
        let nodes: Vec<f64> = (0..n).map(|i| i as f64 * 0.4).collect();
        let table = Rc::new(DisplacementTable::new(&nodes));
        let fused_prog = mixture_program(true, Rc::clone(&table), n, q);
        let generic_prog = mixture_program(false, Rc::clone(&table), n, q);

        let mut vals = vec![-0.3, -1.1, 0.8, 2.0, 0.1, -0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vals.extend((0..n).map(|_| rng.gen_range(-1.0..1.0)));
        let names: Vec<String> = (0..vals.len()).map(|i| format!("p{i}")).collect();
        let params = ParamVector::new(names, vals);

        let (vf, gf) = gradient(&fused_prog, &params).unwrap();
        let (vg, gg) = gradient(&generic_prog, &params).unwrap();
        assert_relative_eq!(vf, vg, max_relative = 1e-12);
        for (a, b) in gf.values().iter().zip(gg.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-7, epsilon = 1e-9);
        }
        let report = gradcheck(&fused_prog, &params, 1e-5, 1e-4, 1e-9).unwrap();
        assert!(
            report.passed,
            "worst {} at {}",
            report.worst_rel_error, report.worst_param
        );
    }

    #[test]
    fn mode_ops_pass_gradcheck_on_2d_tensor() {
        let (m1, m2) = (3, 4);
        let prog = move |tape: &mut Tape, values: &[f64]| {
            let a = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[m1, m1]), values[..m1 * m1].to_vec()).unwrap(),
            )?;
            let t = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[m1, m2]), values[m1 * m1..].to_vec()).unwrap(),
            )?;
            let y = tape.mode_matmul(a, t, 0)?;
            let idx: Vec<usize> = vec![0, 5, 7];
            let picked = tape.gather(y, Rc::new(idx))?;
            let loss = tape.sum_sq(picked)?;
            Ok((loss, vec![(a, 0..m1 * m1), (t, m1 * m1..m1 * m1 + m1 * m2)]))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..m1 * m1 + m1 * m2)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let names: Vec<String> = (0..vals.len()).map(|i| format!("p{i}")).collect();
        let params = ParamVector::new(names, vals);
        let report = gradcheck(&prog, &params, 1e-5, 1e-4, 1e-10).unwrap();
        assert!(
            report.passed,
            "worst {} at {}",
            report.worst_rel_error, report.worst_param
        );
    }

    #[test]
    fn corrupted_adjoint_fails_gradcheck_with_named_parameter() {
        let prog = |tape: &mut Tape, values: &[f64]| {
            let (v, leaves) = leaf_all(tape, values);
            let bad = tape.debug_scale_grad(v, 1.5)?;
            let loss = tape.sum_sq(bad)?;
            Ok((loss, leaves))
        };
        let params = ParamVector::new(vec!["good".into(), "bad".into()], vec![1.0, 2.0]);
        let report = gradcheck(&prog, &params, 1e-5, 1e-4, 1e-9).unwrap();
        assert!(!report.passed);
        assert!(!report.worst_param.is_empty());
        assert!(report.worst_rel_error > 0.1);
    }

    #[test]
    fn non_finite_forward_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let v = tape.leaf_scalar(1000.0).unwrap();
        let err = tape.exp(v).unwrap_err();
        match err {
            GphmError::GradientNonFinite { op } => assert_eq!(op, "exp"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
