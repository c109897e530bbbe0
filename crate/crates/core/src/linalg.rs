//! Small dense helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest entrywise asymmetry `max |M - M^T|`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Eigenvalues of a symmetric matrix, ascending. The input is symmetrized first.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Spectral norm (largest singular value).
///
/// Backed by the Golub-Kahan SVD in nalgebra, which iterates to
/// machine precision; the matrices here are at most a few dozen wide.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Solve `X * B = C` for `X` where `B` is square, via `B^T X^T = C^T`.
pub fn solve_right(b: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let bt = b.transpose();
    let ct = c.transpose();
    bt.lu().solve(&ct).map(|xt| xt.transpose())
}

/// Column-major `vec(M)`.
pub fn vec_col_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_col_major`] for a `rows x cols` matrix.
pub fn unvec_col_major(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

/// Deterministic PSD square root `V diag(sqrt(max(lambda, 0))) V^T`.
///
/// Diagonal inputs take the exact elementwise route, so an identity covariance
/// maps draws through unchanged.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || cov[(i, j)] == 0.0));
    if is_diag {
        return DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                cov[(i, i)].max(0.0).sqrt()
            } else {
                0.0
            }
        });
    }
    let eig = symmetrize(cov).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Matrix stored as a list of rows, the layout used in every JSON document.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(Error::Dimension(format!(
            "{what}: row {i} has {} entries, expected {m}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows, "matrix").map_err(serde::de::Error::custom)
    }
}
