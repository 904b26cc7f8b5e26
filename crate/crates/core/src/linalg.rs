//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
///
/// Only the lower triangle is read.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    let eig = m
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("self-adjoint eigendecomposition of a finite matrix");
    let s = eig.S().column_vector();
    let u = eig.U();
    let values = DVector::from_fn(n, |i, _| s[i]);
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    clear_upper_simd_state();
    (values, vectors)
}

/// Caps the worker threads used by the dense eigensolver; 1 runs it inline.
pub fn set_thread_limit(threads: usize) {
    let par = if threads <= 1 {
        faer::Par::Seq
    } else {
        faer::Par::rayon(threads)
    };
    faer::set_global_parallelism(par);
}

/// Zeroes the upper halves of the vector registers.
///
/// The eigensolver's wide kernels can return with dirty upper register state;
/// legacy-encoded SIMD code that runs afterwards (including libm `exp`) then
/// pays a transition penalty on every instruction.
#[inline]
pub fn clear_upper_simd_state() {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the instruction exists whenever AVX is available and only
            // clears bits that no live value occupies across this call.
            unsafe { zero_upper() }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn zero_upper() {
    std::arch::x86_64::_mm256_zeroupper();
}

/// Squared Euclidean distance between two equally sized slices of a matrix row.
#[inline]
pub fn sq_dist_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..a.ncols() {
        let d = a[(i, c)] - b[(j, c)];
        s += d * d;
    }
    s
}

#[inline]
pub fn sq_dist_to_row(x: &[f64], b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for (c, xc) in x.iter().enumerate() {
        let d = xc - b[(j, c)];
        s += d * d;
    }
    s
}

/// Orthonormalizes the columns of `a` with twice-iterated modified Gram-Schmidt.
///
/// Columns whose residual norm falls below `rel_tol` times their original norm
/// are dropped; the indices of dropped columns are returned alongside the basis.
pub fn orthonormalize_columns(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<usize>) {
    let n = a.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(a.ncols());
    let mut dropped = Vec::new();
    for j in 0..a.ncols() {
        let original = a.column(j).into_owned();
        let norm0 = original.norm();
        let mut v = original;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= rel_tol * norm0 {
            dropped.push(j);
            continue;
        }
        basis.push(v / norm);
    }
    let mut out = DMatrix::zeros(n, basis.len());
    for (j, q) in basis.iter().enumerate() {
        out.set_column(j, q);
    }
    (out, dropped)
}

/// Flips each column so that its largest-magnitude entry is positive.
///
/// Ties on magnitude resolve to the lowest row index.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m.nrows() > 0 && m[(best, j)] < 0.0 {
            m.column_mut(j).neg_mut();
        }
    }
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        assert_eq!(p.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (p.nrows(), cols)).copy_from(*p);
        r += p.nrows();
    }
    out
}
