//! Small dense helpers shared by the diagnostic layers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Full SVD `M = U diag(s) Vᵀ` with singular values in decreasing order.
///
/// nalgebra's implicit-shift SVD can stop early and return a factorization
/// that is off by ~1e-3 on some well-conditioned matrices, so this goes
/// through faer.
pub fn svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let dec = a.svd().expect("SVD of a finite matrix");
    let (u, v, s) = (dec.U(), dec.V(), dec.S().column_vector());
    let k = rows.min(cols);
    (
        DMatrix::from_fn(rows, rows, |i, j| u[(i, j)]),
        DVector::from_fn(k, |i, _| s[i]),
        DMatrix::from_fn(cols, cols, |i, j| v[(j, i)]),
    )
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    svd(m).1.iter().fold(0.0_f64, |a, &b| a.max(b))
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Extreme eigenvalues `(λ_min, λ_max)` of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `f(M)` for symmetric positive definite `M` via its eigendecomposition.
pub fn spd_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotSpd("spectral function of a non-positive matrix".into()));
    }
    let mapped = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&mapped) * eig.eigenvectors.transpose())
}

/// Moore-Penrose pseudoinverse dropping singular values below
/// `rel_tol · σ_max`. Also returns the retained rank and the smallest
/// retained singular value.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize, f64) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(cols, rows), 0, 0.0);
    }
    let (u, sv, vt) = svd(m);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let cutoff = rel_tol * smax;
    let mut out = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    let mut smin = f64::INFINITY;
    for (k, &s) in sv.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            smin = smin.min(s);
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    if rank == 0 {
        smin = 0.0;
    }
    (out, rank, smin)
}

/// Orthonormal basis (as columns) of `ker(M)`, using the same relative rank
/// tolerance as [`pseudo_inverse`].
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    if rows == 0 {
        return DMatrix::identity(cols, cols);
    }
    let (_, sv, vt) = svd(m);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let cutoff = rel_tol * smax;
    let null_rows: Vec<usize> = (0..cols)
        .filter(|&k| sv.get(k).is_none_or(|&s| s <= cutoff))
        .collect();
    let mut basis = DMatrix::zeros(cols, null_rows.len());
    for (c, &k) in null_rows.iter().enumerate() {
        basis.set_column(c, &vt.row(k).transpose());
    }
    basis
}

/// Sine of the largest principal angle between the column spans of two
/// orthonormal bases. Returns 1 when the dimensions differ.
pub fn max_principal_angle_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() != b.ncols() {
        return 1.0;
    }
    if a.ncols() == 0 {
        return 0.0;
    }
    let residual = b - a * (a.transpose() * b);
    spectral_norm(&residual)
}

/// Block diagonal matrix from square or rectangular blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_deficient_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, rank, smin) = pseudo_inverse(&m, 1e-10);
        assert_eq!(rank, 1);
        assert!((smin - 2.0).abs() < 1e-12);
        assert!(max_abs_diff(&(&m * &p * &m), &m) < 1e-12);
        let n = null_space(&m, 1e-10);
        assert_eq!(n.ncols(), 1);
        assert!((&m * &n).norm() < 1e-12);
    }

    #[test]
    fn null_space_of_wide_matrix() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let n = null_space(&m, 1e-10);
        assert_eq!(n.ncols(), 2);
        assert!((&m * &n).norm() < 1e-12);
    }

    #[test]
    fn principal_angles() {
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(max_principal_angle_sin(&e1, &e1) < 1e-15);
        assert!((max_principal_angle_sin(&e1, &e2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = spd_function(&m, f64::sqrt).unwrap();
        assert!(max_abs_diff(&(&r * &r), &m) < 1e-12);
    }
}
