//! Kronecker-structured covariance algebra over grid tensors.
//!
//! The covariance over a tensor-product grid with a product kernel factors as
//! `C = C_1 (x) ... (x) C_d`. Everything here works on the small
//! per-dimension matrices: Cholesky factors with an escalating jitter ladder,
//! `log|C| = sum_j (M/M_j) log|C_j|`, inverse application by per-mode
//! triangular solves, and derivative operators `A_j = D_j C_j^{-1}` applied by
//! tensor mode products. `C_j^{-1}` is never formed; all inverse applications
//! go through triangular solves.

use crate::error::{GphmError, Result};
use crate::linalg;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

/// Dense tensor of solution values over the grid, shape `[M_1, ..., M_d]`.
pub type GridTensor = ArrayD<f64>;

/// Jitter ladder: a zero attempt first, then `1e-10 * mean diagonal`
/// escalating tenfold up to `1e-4 * mean diagonal`.
pub const JITTER_BASE_REL: f64 = 1e-10;
pub const JITTER_MAX_REL: f64 = 1e-4;

/// Always-on jitter floor used by the training objective, relative to
/// `max(mean diagonal, 1)`. Keeping the floor anchored to an absolute scale
/// matters: the mixture weights track the solution variance and can shrink
/// far below 1, and a floor that shrinks with them re-exposes the
/// near-singular Gram directions to the optimizer, which destabilizes
/// training.
pub const TRAIN_JITTER_REL: f64 = 1e-6;

/// Per-dimension factorized covariance state.
#[derive(Debug, Clone)]
pub struct DimFactor {
    /// Order-0 Gram matrix C_j (without jitter).
    pub gram: Array2<f64>,
    /// Lower Cholesky factor of `C_j + jitter * I`.
    pub chol: Array2<f64>,
    /// First-derivative Gram (rows differentiated), if built.
    pub d1: Option<Array2<f64>>,
    /// Second-derivative Gram, if built.
    pub d2: Option<Array2<f64>>,
    /// Jitter actually added, recorded, never silent.
    pub jitter_used: f64,
}

/// Factorized per-dimension covariance bundle.
#[derive(Debug, Clone)]
pub struct GramBundle {
    pub dims: Vec<DimFactor>,
}

/// Runs the jitter ladder on one symmetric matrix. Returns the factor and the
/// jitter used. Well-conditioned matrices factorize at jitter zero.
pub fn cholesky_with_jitter(gram: &Array2<f64>, dim: usize) -> Result<(Array2<f64>, f64)> {
    cholesky_with_floor(gram, dim, 0.0)
}

/// Jitter ladder with an always-on floor of `floor_rel * max(mean diag, 1)`;
/// the training objective uses [`TRAIN_JITTER_REL`] here.
pub fn cholesky_with_floor(
    gram: &Array2<f64>,
    dim: usize,
    floor_rel: f64,
) -> Result<(Array2<f64>, f64)> {
    let n = gram.nrows();
    if n == 0 || gram.ncols() != n {
        return Err(GphmError::Domain(format!(
            "dimension {dim}: gram must be square and non-empty"
        )));
    }
    if gram.iter().any(|x| !x.is_finite()) {
        return Err(GphmError::NonFiniteInput(format!("gram for dimension {dim}")));
    }
    let mean_diag = gram.diag().sum() / n as f64;
    let mut ladder = if floor_rel > 0.0 {
        vec![floor_rel * mean_diag.abs().max(1.0)]
    } else {
        vec![0.0]
    };
    let mut j = JITTER_BASE_REL * mean_diag.abs().max(f64::MIN_POSITIVE);
    let max_j = (JITTER_MAX_REL * mean_diag.abs().max(f64::MIN_POSITIVE)).max(ladder[0]);
    while j <= max_j * (1.0 + 1e-12) {
        if j > ladder[0] {
            ladder.push(j);
        }
        j *= 10.0;
    }
    for &jitter in &ladder {
        let mut l = gram.clone();
        for i in 0..n {
            l[[i, i]] += jitter;
        }
        if linalg::cholesky_in_place(&mut l).is_ok() {
            return Ok((l, jitter));
        }
    }
    Err(GphmError::NotPositiveDefinite {
        dim,
        ladder,
        mean_diag,
    })
}

/// Factorizes a list of symmetric per-dimension Gram matrices.
pub fn factorize(grams: Vec<Array2<f64>>) -> Result<GramBundle> {
    let mut dims = Vec::with_capacity(grams.len());
    for (j, gram) in grams.into_iter().enumerate() {
        let (chol, jitter_used) = cholesky_with_jitter(&gram, j)?;
        dims.push(DimFactor {
            gram,
            chol,
            d1: None,
            d2: None,
            jitter_used,
        });
    }
    Ok(GramBundle { dims })
}

impl GramBundle {
    /// Factorizes Gram matrices together with their derivative Grams.
    pub fn with_derivatives(
        parts: Vec<(Array2<f64>, Option<Array2<f64>>, Option<Array2<f64>>)>,
    ) -> Result<Self> {
        Self::with_derivatives_floor(parts, 0.0)
    }

    /// Like [`GramBundle::with_derivatives`], with an always-on jitter floor
    /// (the training/prediction paths pass [`TRAIN_JITTER_REL`]).
    pub fn with_derivatives_floor(
        parts: Vec<(Array2<f64>, Option<Array2<f64>>, Option<Array2<f64>>)>,
        floor_rel: f64,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(parts.len());
        for (j, (gram, d1, d2)) in parts.into_iter().enumerate() {
            let (chol, jitter_used) = cholesky_with_floor(&gram, j, floor_rel)?;
            dims.push(DimFactor {
                gram,
                chol,
                d1,
                d2,
                jitter_used,
            });
        }
        Ok(Self { dims })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.gram.nrows()).collect()
    }

    fn check_shape(&self, t: &GridTensor) -> Result<()> {
        let want = self.shape();
        if t.shape() != want.as_slice() {
            for (j, (&got, &expected)) in t.shape().iter().zip(want.iter()).enumerate() {
                if got != expected {
                    return Err(GphmError::ShapeMismatch {
                        dim: j,
                        expected,
                        got,
                    });
                }
            }
            return Err(GphmError::Domain(format!(
                "tensor rank {} does not match bundle rank {}",
                t.ndim(),
                self.ndim()
            )));
        }
        Ok(())
    }
}

/// `log|C_1 (x) ... (x) C_d| = sum_j (M/M_j) log|C_j|`, with the jittered
/// matrices used consistently.
pub fn kron_logdet(bundle: &GramBundle) -> f64 {
    let m: usize = bundle.dims.iter().map(|d| d.gram.nrows()).product();
    bundle
        .dims
        .iter()
        .map(|d| {
            let mj = d.gram.nrows();
            (m / mj) as f64 * linalg::logdet_from_chol(&d.chol.view())
        })
        .sum()
}

/// Moves `mode` to the front and flattens the rest, returning a standard
/// layout matrix of shape `(M_mode, M / M_mode)`.
pub fn unfold(t: &GridTensor, mode: usize) -> Array2<f64> {
    let d = t.ndim();
    assert!(mode < d);
    let mut order: Vec<usize> = Vec::with_capacity(d);
    order.push(mode);
    order.extend((0..d).filter(|&ax| ax != mode));
    let moved = t.view().permuted_axes(IxDyn(&order));
    let m_mode = t.shape()[mode];
    let rest: usize = t.len() / m_mode;
    let contiguous = moved.as_standard_layout().into_owned();
    contiguous
        .into_shape((m_mode, rest))
        .expect("unfold reshape")
}

/// Inverse of [`unfold`]: folds a `(rows, M / M_mode)` matrix back into a
/// tensor whose `mode` extent is `rows` and whose other extents match `shape`.
pub fn fold(mat: Array2<f64>, shape: &[usize], mode: usize) -> GridTensor {
    let d = shape.len();
    let rows = mat.nrows();
    let mut moved_shape: Vec<usize> = Vec::with_capacity(d);
    moved_shape.push(rows);
    moved_shape.extend((0..d).filter(|&ax| ax != mode).map(|ax| shape[ax]));
    let moved = mat
        .into_shape(IxDyn(&moved_shape))
        .expect("fold reshape");
    // Undo the axis move: axis 0 goes back to position `mode`.
    let mut inverse_order: Vec<usize> = Vec::with_capacity(d);
    let mut next = 1;
    for ax in 0..d {
        if ax == mode {
            inverse_order.push(0);
        } else {
            inverse_order.push(next);
            next += 1;
        }
    }
    moved
        .permuted_axes(IxDyn(&inverse_order))
        .as_standard_layout()
        .into_owned()
}

/// Multiplies `t` along `mode` by `a` (Tucker mode product).
pub fn mode_matmul(a: ArrayView2<f64>, t: &GridTensor, mode: usize) -> Result<GridTensor> {
    if mode >= t.ndim() {
        return Err(GphmError::Domain(format!(
            "mode {mode} out of range for tensor of rank {}",
            t.ndim()
        )));
    }
    if a.ncols() != t.shape()[mode] {
        return Err(GphmError::ShapeMismatch {
            dim: mode,
            expected: t.shape()[mode],
            got: a.ncols(),
        });
    }
    let x = unfold(t, mode);
    let y = a.dot(&x);
    let mut shape = t.shape().to_vec();
    shape[mode] = a.nrows();
    Ok(fold(y, &shape, mode))
}

/// Applies a list of `(mode, matrix)` products; untouched modes are identity.
/// At most one op per mode.
pub fn mode_apply(t: &GridTensor, ops: &[(usize, ArrayView2<f64>)]) -> Result<GridTensor> {
    let mut seen = vec![false; t.ndim()];
    for &(mode, _) in ops {
        if mode >= t.ndim() {
            return Err(GphmError::Domain(format!(
                "mode {mode} out of range for tensor of rank {}",
                t.ndim()
            )));
        }
        if seen[mode] {
            return Err(GphmError::Domain(format!("duplicate op for mode {mode}")));
        }
        seen[mode] = true;
    }
    let mut out = t.clone();
    for &(mode, a) in ops {
        out = mode_matmul(a, &out, mode)?;
    }
    Ok(out)
}

/// Solves `op(L_j)`-triangular systems along `mode` of a tensor.
pub fn mode_tri_solve(
    l: &ArrayView2<f64>,
    t: &GridTensor,
    mode: usize,
    transpose: bool,
) -> Result<GridTensor> {
    if mode >= t.ndim() {
        return Err(GphmError::Domain(format!(
            "mode {mode} out of range for tensor of rank {}",
            t.ndim()
        )));
    }
    if l.nrows() != t.shape()[mode] {
        return Err(GphmError::ShapeMismatch {
            dim: mode,
            expected: t.shape()[mode],
            got: l.nrows(),
        });
    }
    let mut x = unfold(t, mode);
    linalg::tri_solve_in_place(l, &mut x, transpose);
    Ok(fold(x, t.shape(), mode))
}

/// Applies `(C_j + jitter I)^{-1}` along `mode` via two triangular solves.
pub fn mode_spd_solve(factor: &DimFactor, t: &GridTensor, mode: usize) -> Result<GridTensor> {
    let y = mode_tri_solve(&factor.chol.view(), t, mode, false)?;
    mode_tri_solve(&factor.chol.view(), &y, mode, true)
}

/// `C^{-1} vec(U)` through the Kronecker structure: applies each
/// per-dimension inverse by two triangular solves per mode.
pub fn kron_solve(bundle: &GramBundle, t: &GridTensor) -> Result<GridTensor> {
    bundle.check_shape(t)?;
    let mut out = t.clone();
    for (j, dim) in bundle.dims.iter().enumerate() {
        out = mode_spd_solve(dim, &out, j)?;
    }
    Ok(out)
}

/// Builds the per-dimension conditional-mean derivative operators
/// `A_j = D_j C_j^{-1}` for the requested orders (order 0 contributes no op).
/// Composing the result with [`mode_apply`] on `U` predicts the mixed
/// derivative at every grid point.
pub fn derivative_operator(
    bundle: &GramBundle,
    dim_orders: &[(usize, usize)],
) -> Result<Vec<(usize, Array2<f64>)>> {
    let mut out = Vec::new();
    for &(dim, order) in dim_orders {
        if dim >= bundle.ndim() {
            return Err(GphmError::Domain(format!(
                "dimension {dim} out of range for bundle of rank {}",
                bundle.ndim()
            )));
        }
        let factor = &bundle.dims[dim];
        let d = match order {
            0 => continue,
            1 => factor.d1.as_ref().ok_or(GphmError::Domain(format!(
                "dimension {dim}: first-derivative Gram not built"
            )))?,
            2 => factor.d2.as_ref().ok_or(GphmError::Domain(format!(
                "dimension {dim}: second-derivative Gram not built"
            )))?,
            order => return Err(GphmError::UnsupportedOrder { order }),
        };
        // A = D C^{-1}  <=>  A^T = C^{-1} D^T, never forming C^{-1}.
        let at = linalg::spd_solve(&factor.chol.view(), &d.t().to_owned());
        out.push((dim, at.t().to_owned()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr2, ArrayD};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        b.dot(&b.t()) + Array2::<f64>::eye(n) * (n as f64 * 0.2)
    }

    fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> GridTensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Independent dense Kronecker product oracle.
    fn kron_dense(mats: &[Array2<f64>]) -> Array2<f64> {
        let mut acc = Array2::from_elem((1, 1), 1.0);
        for m in mats {
            let (ar, ac) = (acc.nrows(), acc.ncols());
            let (br, bc) = (m.nrows(), m.ncols());
            let mut out = Array2::zeros((ar * br, ac * bc));
            for i in 0..ar {
                for j in 0..ac {
                    for k in 0..br {
                        for l in 0..bc {
                            out[[i * br + k, j * bc + l]] = acc[[i, j]] * m[[k, l]];
                        }
                    }
                }
            }
            acc = out;
        }
        acc
    }

    #[test]
    fn factorize_scalar_matrix() {
        let b = factorize(vec![arr2(&[[2.0]])]).unwrap();
        assert_relative_eq!(b.dims[0].chol[[0, 0]], 2f64.sqrt(), max_relative = 1e-15);
        assert_eq!(b.dims[0].jitter_used, 0.0);
    }

    #[test]
    fn factorize_identity_is_identity() {
        let b = factorize(vec![Array2::eye(4)]).unwrap();
        assert_eq!(b.dims[0].jitter_used, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(b.dims[0].chol[[i, j]], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn factorize_reconstructs_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(6, &mut rng);
        let b = factorize(vec![a.clone()]).unwrap();
        let rec = b.dims[0].chol.dot(&b.dims[0].chol.t());
        let mut target = a.clone();
        for i in 0..6 {
            target[[i, i]] += b.dims[0].jitter_used;
        }
        let num = (&rec - &target).mapv(|x| x * x).sum().sqrt();
        let den = target.mapv(|x| x * x).sum().sqrt();
        assert!(num / den < 1e-12);
    }

    #[test]
    fn factorize_names_failing_dimension() {
        let bad = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        let err = factorize(vec![Array2::eye(2), bad]).unwrap_err();
        match err {
            GphmError::NotPositiveDefinite { dim, ladder, .. } => {
                assert_eq!(dim, 1);
                assert!(ladder.len() >= 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn logdet_of_scalar_kron() {
        let b = factorize(vec![arr2(&[[2.0]]), arr2(&[[3.0]])]).unwrap();
        assert_relative_eq!(kron_logdet(&b), 6f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn logdet_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c1 = random_spd(3, &mut rng);
        let c2 = random_spd(4, &mut rng);
        let b = factorize(vec![c1.clone(), c2.clone()]).unwrap();
        // Oracle: dense 12x12 Kronecker with the recorded jitters applied.
        let mut j1 = c1;
        let mut j2 = c2;
        for i in 0..3 {
            j1[[i, i]] += b.dims[0].jitter_used;
        }
        for i in 0..4 {
            j2[[i, i]] += b.dims[1].jitter_used;
        }
        let full = kron_dense(&[j1, j2]);
        let nf = nalgebra::DMatrix::from_fn(12, 12, |i, j| full[[i, j]]);
        let expect = nf.cholesky().unwrap().l().diagonal().map(|d| d.ln()).sum() * 2.0;
        assert_relative_eq!(kron_logdet(&b), expect, max_relative = 1e-10);
    }

    #[test]
    fn mode_apply_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = random_tensor(&[3, 4, 2], &mut rng);
        let i3 = Array2::eye(3);
        let i4 = Array2::eye(4);
        let out = mode_apply(&t, &[(0, i3.view()), (1, i4.view())]).unwrap();
        assert_relative_eq!((&out - &t).mapv(f64::abs).sum(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn mode_apply_1d_is_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = random_tensor(&[5], &mut rng);
        let a = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let out = mode_apply(&t, &[(0, a.view())]).unwrap();
        let v = t.clone().into_shape((5,)).unwrap();
        let expect = a.dot(&v);
        for i in 0..3 {
            assert_relative_eq!(out[[i]], expect[i], max_relative = 1e-13);
        }
    }

    #[test]
    fn mode_apply_matches_dense_kron_oracle() {
        // vec(result) = (A1 (x) A2) vec(U) with dimension 1 slowest-varying,
        // i.e. row-major flattening.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let u = random_tensor(&[3, 4], &mut rng);
        let a1 = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let a2 = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let out = mode_apply(&u, &[(0, a1.view()), (1, a2.view())]).unwrap();
        let full = kron_dense(&[a1, a2]);
        let vec_u = Array2::from_shape_vec((12, 1), u.iter().cloned().collect()).unwrap();
        let expect = full.dot(&vec_u);
        for (i, &v) in out.iter().enumerate() {
            assert_relative_eq!(v, expect[[i, 0]], max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn mode_apply_rejects_shape_mismatch() {
        let t = ArrayD::zeros(IxDyn(&[3, 4]));
        let a = Array2::<f64>::eye(5);
        match mode_apply(&t, &[(1, a.view())]) {
            Err(GphmError::ShapeMismatch { dim: 1, expected: 4, got: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kron_solve_zero_is_zero() {
        let b = factorize(vec![Array2::eye(3), Array2::eye(2)]).unwrap();
        let t = ArrayD::zeros(IxDyn(&[3, 2]));
        let out = kron_solve(&b, &t).unwrap();
        assert_eq!(out.iter().map(|x| x.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn kron_solve_identity_gram_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let b = factorize(vec![Array2::eye(4)]).unwrap();
        let t = random_tensor(&[4], &mut rng);
        let out = kron_solve(&b, &t).unwrap();
        for i in 0..4 {
            assert_relative_eq!(out[[i]], t[[i]], max_relative = 1e-12);
        }
    }

    #[test]
    fn kron_solve_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c1 = random_spd(3, &mut rng);
        let c2 = random_spd(4, &mut rng);
        let b = factorize(vec![c1.clone(), c2.clone()]).unwrap();
        let t = random_tensor(&[3, 4], &mut rng);
        let out = kron_solve(&b, &t).unwrap();

        let mut j1 = c1;
        let mut j2 = c2;
        for i in 0..3 {
            j1[[i, i]] += b.dims[0].jitter_used;
        }
        for i in 0..4 {
            j2[[i, i]] += b.dims[1].jitter_used;
        }
        let full = kron_dense(&[j1, j2]);
        let nf = nalgebra::DMatrix::from_fn(12, 12, |i, j| full[[i, j]]);
        let bv = nalgebra::DVector::from_iterator(12, t.iter().cloned());
        let x = nf.cholesky().unwrap().solve(&bv);
        for (i, &v) in out.iter().enumerate() {
            assert_relative_eq!(v, x[i], max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn solve_then_multiply_back_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let c1 = random_spd(5, &mut rng);
        let c2 = random_spd(3, &mut rng);
        let b = factorize(vec![c1.clone(), c2.clone()]).unwrap();
        let t = random_tensor(&[5, 3], &mut rng);
        let solved = kron_solve(&b, &t).unwrap();
        let mut j1 = c1;
        let mut j2 = c2;
        for i in 0..5 {
            j1[[i, i]] += b.dims[0].jitter_used;
        }
        for i in 0..3 {
            j2[[i, i]] += b.dims[1].jitter_used;
        }
        let back = mode_apply(&solved, &[(0, j1.view()), (1, j2.view())]).unwrap();
        let num = (&back - &t).mapv(|x| x * x).sum().sqrt();
        let den = t.mapv(|x| x * x).sum().sqrt();
        assert!(num / den < 1e-8, "round trip rel err {}", num / den);
    }

    #[test]
    fn mode_apply_order_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let t = random_tensor(&[3, 4, 2], &mut rng);
        let a0 = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let a1 = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let a2 = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let combined =
            mode_apply(&t, &[(0, a0.view()), (1, a1.view()), (2, a2.view())]).unwrap();
        // One mode at a time, permuted order.
        let step = mode_apply(&t, &[(2, a2.view())]).unwrap();
        let step = mode_apply(&step, &[(0, a0.view())]).unwrap();
        let step = mode_apply(&step, &[(1, a1.view())]).unwrap();
        let diff = (&combined - &step).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-13, "associativity violation {diff}");
    }

    #[test]
    fn derivative_operator_empty_for_order_zero() {
        let b = factorize(vec![Array2::eye(3)]).unwrap();
        let ops = derivative_operator(&b, &[(0, 0)]).unwrap();
        assert!(ops.is_empty());
    }

    #[test]
    fn derivative_operator_rejects_order_three() {
        let b = factorize(vec![Array2::eye(3)]).unwrap();
        assert!(matches!(
            derivative_operator(&b, &[(0, 3)]),
            Err(GphmError::UnsupportedOrder { order: 3 })
        ));
    }
}
