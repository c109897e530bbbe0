//! Least squares for `A` when the hidden states are observed.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, lambda_min_sym};

/// `(sum_{t=0}^{T-2} beta_{t+1} beta_t^T) (sum_{t=0}^{T-2} beta_t beta_t^T)^{-1}`,
/// computed by a linear solve. `betas` is `T x d`.
pub fn ols_full_state(betas: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, d) = betas.shape();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let head = betas.rows(0, n - 1);
    let tail = betas.rows(1, n - 1);
    let cross = tail.tr_mul(&head);
    let gram = head.tr_mul(&head);
    let threshold = 1e-12 * gram.trace() / d as f64;
    let lmin = lambda_min_sym(&gram);
    if lmin <= threshold {
        return Err(Error::SingularDesign {
            lambda_min: lmin,
            threshold,
        });
    }
    linalg::solve_right(&gram, &cross).ok_or(Error::SingularDesign {
        lambda_min: lmin,
        threshold,
    })
}
