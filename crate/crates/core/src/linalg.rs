//! Small dense symmetric-matrix helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Moore-Penrose pseudoinverse of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymPinv {
    pub pinv: DMatrix<f64>,
    /// Number of eigenvalues above `rel_tol * max |eigenvalue|`.
    pub rank: usize,
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
}

/// Pseudoinverse through the spectral decomposition; eigenvalues at or below
/// `rel_tol` times the largest magnitude (and all negative ones) are treated
/// as zero.
pub fn sym_pinv(m: &DMatrix<f64>, rel_tol: f64) -> SymPinv {
    let sym = (m + m.transpose()) * 0.5;
    let dim = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cutoff = rel_tol * scale;
    let mut pinv = DMatrix::zeros(dim, dim);
    let mut rank = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff && lambda > 0.0 {
            let v = eig.eigenvectors.column(i);
            pinv += (v * v.transpose()) / lambda;
            rank += 1;
        }
    }
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    SymPinv { pinv, rank, eigenvalues }
}

/// `d' A d`.
pub fn quad_form(a: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    (d.transpose() * a * d)[(0, 0)]
}
