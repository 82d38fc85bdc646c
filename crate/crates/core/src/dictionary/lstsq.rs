//! Normal-equation solver for the indicator regression `min_U ||A - C U||_F`.

use nalgebra::{DMatrix, SymmetricEigen};

/// Solves `(G + ridge I) U = R` with `G` symmetric positive semi-definite.
///
/// Eigenvalues below `len * eps * max_eig` are treated as zero, which yields the
/// minimum-norm (pseudoinverse) solution when `G` is singular. Returns the solution
/// and the numerical rank.
pub fn solve_psd(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> (DMatrix<f64>, usize) {
    let s = gram.nrows();
    let mut g = gram.clone();
    for i in 0..s {
        g[(i, i)] += ridge;
    }
    let eig = SymmetricEigen::new(g);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = (s.max(1) as f64) * f64::EPSILON * max_eig * 16.0;

    // U = V diag(1/l) V^T R, skipping null directions.
    let vt_r = eig.eigenvectors.transpose() * rhs;
    let mut scaled = vt_r;
    let mut rank = 0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > tol {
            rank += 1;
            scaled.row_mut(i).scale_mut(1.0 / l);
        } else {
            scaled.row_mut(i).fill(0.0);
        }
    }
    (&eig.eigenvectors * scaled, rank)
}
