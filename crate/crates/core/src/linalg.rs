//! Small dense helpers over fixed-size nalgebra types.

use nalgebra::{DMatrix, SMatrix, SVector, SymmetricEigen};

pub type Vector<const D: usize> = SVector<f64, D>;
pub type Matrix<const D: usize> = SMatrix<f64, D, D>;

/// Returns `Some(c)` when `m` equals `c·I` up to `tol`.
pub fn scalar_part<const D: usize>(m: &Matrix<D>, tol: f64) -> Option<f64> {
    let c = m[(0, 0)];
    for i in 0..D {
        for j in 0..D {
            let target = if i == j { c } else { 0.0 };
            if (m[(i, j)] - target).abs() > tol {
                return None;
            }
        }
    }
    Some(c)
}

/// `exp(s·m)` for symmetric `m`.
pub fn sym_exp<const D: usize>(m: &Matrix<D>, s: f64) -> Matrix<D> {
    if let Some(c) = scalar_part(m, 1e-14) {
        return Matrix::<D>::identity() * (s * c).exp();
    }
    let sym = (m + m.transpose()) * 0.5;
    let dm = DMatrix::from_column_slice(D, D, sym.as_slice());
    let eig = SymmetricEigen::new(dm);
    let mut out = Matrix::<D>::zeros();
    for k in 0..D {
        let w = (s * eig.eigenvalues[k]).exp();
        for i in 0..D {
            for j in 0..D {
                out[(i, j)] += w * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues<const D: usize>(m: &Matrix<D>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let dm = DMatrix::from_column_slice(D, D, sym.as_slice());
    let mut ev: Vec<f64> = SymmetricEigen::new(dm).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Symmetric inverse square root `m^{-1/2}` of an SPD matrix.
pub fn sym_inv_sqrt<const D: usize>(m: &Matrix<D>) -> Matrix<D> {
    let sym = (m + m.transpose()) * 0.5;
    let dm = DMatrix::from_column_slice(D, D, sym.as_slice());
    let eig = SymmetricEigen::new(dm);
    let mut out = Matrix::<D>::zeros();
    for k in 0..D {
        let w = eig.eigenvalues[k].max(f64::MIN_POSITIVE).powf(-0.5);
        for i in 0..D {
            for j in 0..D {
                out[(i, j)] += w * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    out
}

/// `s^{-1/2}` for `s` close to the identity, via the binomial series to third order.
pub fn inv_sqrt_near_identity<const D: usize>(s: &Matrix<D>) -> Matrix<D> {
    let e = s - Matrix::<D>::identity();
    let e2 = e * e;
    Matrix::<D>::identity() - e * 0.5 + e2 * 0.375 - e2 * e * 0.3125
}

/// Largest absolute entry.
pub fn max_abs<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Spectral norm (largest singular value).
pub fn op_norm<const D: usize>(m: &Matrix<D>) -> f64 {
    let ev = sym_eigenvalues(&(m.transpose() * m));
    ev.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}
