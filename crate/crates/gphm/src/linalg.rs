//! Dense symmetric/triangular kernels used by the Kronecker algebra.
//!
//! Factorizations are blocked so the trailing updates run through the
//! matrix-multiply fast path; the unblocked parts operate on contiguous rows.
//! Everything is single-threaded and bitwise deterministic.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};

const BLOCK: usize = 48;

/// In-place lower Cholesky of a symmetric positive definite matrix.
/// On success the lower triangle holds L (the strict upper triangle is
/// zeroed). Returns the failing pivot index on breakdown.
pub fn cholesky_in_place(a: &mut Array2<f64>) -> Result<(), usize> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        // Factor the diagonal block.
        {
            let mut diag = a.slice_mut(s![k..k + kb, k..k + kb]);
            cholesky_unblocked(&mut diag).map_err(|p| k + p)?;
        }
        if k + kb < n {
            // Panel solve: A[k+kb.., k..k+kb] := A[...] * L_kk^{-T}.
            let (diag, mut panel) = {
                let (top, bottom) = a.view_mut().split_at(ndarray::Axis(0), k + kb);
                (
                    top.slice_move(s![k..k + kb, k..k + kb]),
                    bottom.slice_move(s![.., k..k + kb]),
                )
            };
            solve_xlt_in_place(&diag.view(), &mut panel);
            // Trailing update: A[k+kb.., k+kb..] -= panel * panel^T.
            let panel_owned = panel.to_owned();
            let update = panel_owned.dot(&panel_owned.t());
            let mut trailing = a.slice_mut(s![k + kb.., k + kb..]);
            trailing -= &update;
        }
        k += kb;
    }
    // Zero the strict upper triangle so L is directly usable.
    for i in 0..n {
        for j in i + 1..n {
            a[[i, j]] = 0.0;
        }
    }
    Ok(())
}

fn cholesky_unblocked(a: &mut ArrayViewMut2<f64>) -> Result<(), usize> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(j);
        }
        let ljj = d.sqrt();
        a[[j, j]] = ljj;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / ljj;
        }
    }
    Ok(())
}

/// Solves X * L^T = B in place (B overwritten by X), with L lower triangular.
/// Used for the Cholesky panel update.
fn solve_xlt_in_place(l: &ArrayView2<f64>, b: &mut ArrayViewMut2<f64>) {
    let n = l.nrows();
    let m = b.nrows();
    for i in 0..m {
        for j in 0..n {
            let mut v = b[[i, j]];
            for k in 0..j {
                v -= b[[i, k]] * l[[j, k]];
            }
            b[[i, j]] = v / l[[j, j]];
        }
    }
}

/// Solves `op(L) X = B` in place for X, with L lower triangular and B of
/// shape (n, k). `transpose` selects op(L) = L^T. Row-major B keeps the inner
/// update loops on contiguous rows.
pub fn tri_solve_in_place(l: &ArrayView2<f64>, b: &mut Array2<f64>, transpose: bool) {
    let n = l.nrows();
    assert_eq!(b.nrows(), n, "triangular solve shape mismatch");
    let k = b.ncols();
    if b.as_slice_mut().is_none() {
        // ndarray matmul may hand back F-order outputs; normalize.
        *b = b.as_standard_layout().into_owned();
    }
    let bs = b.as_slice_mut().expect("standard layout after normalization");
    if !transpose {
        // Forward substitution, blocked: B_i -= L[i, ..i] * X[..i].
        let mut i0 = 0;
        while i0 < n {
            let ib = BLOCK.min(n - i0);
            for i in i0..i0 + ib {
                for j in i0..i {
                    let lij = l[[i, j]];
                    if lij != 0.0 {
                        let (xs, bs2) = bs.split_at_mut(i * k);
                        let xj = &xs[j * k..(j + 1) * k];
                        let bi = &mut bs2[..k];
                        for t in 0..k {
                            bi[t] -= lij * xj[t];
                        }
                    }
                }
                let inv = 1.0 / l[[i, i]];
                for t in 0..k {
                    bs[i * k + t] *= inv;
                }
            }
            if i0 + ib < n {
                // GEMM update of the remaining rows.
                let x_block = Array2::from_shape_vec(
                    (ib, k),
                    bs[i0 * k..(i0 + ib) * k].to_vec(),
                )
                .unwrap();
                let l_panel = l.slice(s![i0 + ib.., i0..i0 + ib]);
                let update = l_panel.dot(&x_block);
                let us = update.as_slice().unwrap();
                let rest = &mut bs[(i0 + ib) * k..];
                for (r, u) in rest.iter_mut().zip(us.iter()) {
                    *r -= u;
                }
            }
            i0 += ib;
        }
    } else {
        // Back substitution with L^T, blocked from the bottom.
        let mut i1 = n;
        while i1 > 0 {
            let ib = BLOCK.min(i1);
            let i0 = i1 - ib;
            for i in (i0..i1).rev() {
                for j in i + 1..i1 {
                    let lji = l[[j, i]];
                    if lji != 0.0 {
                        let (head, tail) = bs.split_at_mut(j * k);
                        let bi = &mut head[i * k..(i + 1) * k];
                        let xj = &tail[..k];
                        for t in 0..k {
                            bi[t] -= lji * xj[t];
                        }
                    }
                }
                let inv = 1.0 / l[[i, i]];
                for t in 0..k {
                    bs[i * k + t] *= inv;
                }
            }
            if i0 > 0 {
                let x_block = Array2::from_shape_vec(
                    (ib, k),
                    bs[i0 * k..i1 * k].to_vec(),
                )
                .unwrap();
                let l_panel = l.slice(s![i0..i1, 0..i0]);
                let update = l_panel.t().dot(&x_block);
                let us = update.as_slice().unwrap();
                for (r, u) in bs[..i0 * k].iter_mut().zip(us.iter()) {
                    *r -= u;
                }
            }
            i1 = i0;
        }
    }
}

/// Solves the SPD system `(L L^T) X = B` by two triangular solves.
pub fn spd_solve(l: &ArrayView2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut x = b.clone();
    tri_solve_in_place(l, &mut x, false);
    tri_solve_in_place(l, &mut x, true);
    x
}

/// Explicit inverse of `L L^T` from the Cholesky factor: `L^{-T} L^{-1}`.
pub fn spd_inverse_from_chol(l: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut w = Array2::eye(n);
    tri_solve_in_place(l, &mut w, false); // W = L^{-1}
    w.t().dot(&w)
}

/// Log-determinant of `L L^T` from the factor diagonal.
pub fn logdet_from_chol(l: &ArrayView2<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>() * 2.0
}

/// Lower-triangular projection with halved diagonal, `Phi` in the Cholesky
/// pullback formula.
pub fn phi_lower_half_diag(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        a[[i, i]] *= 0.5;
        for j in i + 1..n {
            a[[i, j]] = 0.0;
        }
    }
}

/// Adjoint of the Cholesky factorization: given `L` and the factor adjoint
/// `l_bar`, returns the symmetric input adjoint
/// `C_bar = (S + S^T)/2` with `S = L^{-T} Phi(L^T l_bar) L^{-1}`.
pub fn cholesky_adjoint(l: &ArrayView2<f64>, l_bar: &Array2<f64>) -> Array2<f64> {
    let mut p = l.t().dot(l_bar);
    phi_lower_half_diag(&mut p);
    // S = L^{-T} P L^{-1}: solve L^T S1 = P, then L^T S^T = S1^T.
    let mut s1 = p;
    tri_solve_in_place(l, &mut s1, true);
    let mut st = s1.t().as_standard_layout().into_owned();
    tri_solve_in_place(l, &mut st, true);
    let s = st.t().as_standard_layout().into_owned();
    0.5 * (&s + &st)
}
