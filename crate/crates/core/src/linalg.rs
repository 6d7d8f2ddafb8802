//! Small dense linear-algebra helpers shared across model classes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Force exact symmetry: (M + Mᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition returning (eigenvalues, eigenvectors).
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = symmetrize(m).symmetric_eigen();
    (se.eigenvalues, se.eigenvectors)
}

/// Principal square root of a symmetric PSD matrix.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero; an eigenvalue below
/// `-tol` means the input is not PSD and is an error. `tol` is scaled by
/// the largest eigenvalue magnitude so well-conditioned large matrices do
/// not trip the absolute floor.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let thresh = tol * scale;
    let mut roots = DVector::zeros(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if v < -thresh {
            return Err(Error::NotPsd(format!(
                "eigenvalue {v:.3e} below -{thresh:.3e}"
            )));
        }
        roots[i] = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&roots);
    Ok(&vecs * d * vecs.transpose())
}

/// Clamp a nominally-PSD symmetric matrix: negative eigenvalues in
/// `[-tol·scale, 0)` become 0, anything lower is an error.
pub fn psd_clamp(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let thresh = tol * scale;
    let mut clamped = DVector::zeros(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if v < -thresh {
            return Err(Error::NotPsd(format!(
                "eigenvalue {v:.3e} below -{thresh:.3e}"
            )));
        }
        clamped[i] = v.max(0.0);
    }
    let d = DMatrix::from_diagonal(&clamped);
    Ok(&vecs * d * vecs.transpose())
}

/// Floor the eigenvalues of a symmetric matrix at `floor` and rebuild.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let d = DMatrix::from_diagonal(&vals.map(|v| v.max(floor)));
    &vecs * d * vecs.transpose()
}

/// Scale-relative eigenvalue floor: eigenvalues below rel·λ_max rise to it,
/// capping the condition number at 1/rel. A matrix whose spectrum is
/// uniformly tiny (or nonpositive) only gets its negatives clamped, so a
/// genuinely degenerate limit stays degenerate.
pub fn eigen_floor_rel(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let floor = rel * vals.iter().fold(0.0f64, |a, &v| a.max(v));
    let d = DMatrix::from_diagonal(&vals.map(|v| v.max(floor)));
    &vecs * d * vecs.transpose()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().fold(f64::INFINITY, |a, &v| a.min(v))
}

/// Cholesky-based inverse and log-determinant of a symmetric PD matrix.
/// A failed factorization after one jitter retry is a numerical failure.
pub fn pd_inverse_logdet(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let sym = symmetrize(m);
    let chol = match sym.clone().cholesky() {
        Some(c) => c,
        None => {
            let scale = sym.diagonal().amax().max(1.0);
            let jittered = &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * (1e-10 * scale);
            jittered.cholesky().ok_or_else(|| {
                Error::NumericalFailure("matrix not positive definite after jitter".into())
            })?
        }
    };
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((chol.inverse(), logdet))
}

/// Row-major nested-array view of a matrix, for JSON serialization.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Rebuild a matrix from row-major nested arrays; rows must be rectangular.
pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::DimensionMismatch(format!(
                "{what}: row {i} has {} entries, row 0 has {ncols}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Moore-Penrose pseudo-inverse via SVD with a relative singular-value cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .expect("svd requested both factors")
}

/// Numerical rank from singular values with threshold `n·σ_max·1e-12`,
/// where n is the row count.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    if smax == 0.0 {
        return 0;
    }
    let thresh = m.nrows() as f64 * smax * 1e-12;
    svd.singular_values.iter().filter(|&&s| s > thresh).count()
}

/// Solve X·A = B for X given symmetric PSD A, i.e. X = B·A⁻¹, falling back
/// to the pseudo-inverse when A is singular.
pub fn solve_right(b: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(a);
    match sym.clone().cholesky() {
        Some(chol) => {
            // X A = B  ⇔  A Xᵀ = Bᵀ
            let xt = chol.solve(&b.transpose());
            xt.transpose()
        }
        None => b * pseudo_inverse(&sym),
    }
}
