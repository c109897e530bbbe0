//! The covariance method: regress `y_t^2` on `svec(x_t x_t^T)` to recover the
//! stationary state covariance, regress `y_t y_{t+1}` on `vec(x_{t+1} x_t^T)` to
//! recover `A Sigma_inf`, then solve for `A`.
//!
//! Conventions:
//! * `svec` walks the upper triangle row by row, diagonal included, and scales
//!   strictly off-diagonal entries by `sqrt(2)` so that `||svec(M)|| = ||M||_F`.
//! * `vec` is column-major. Entry `i + j d` of a cross-design row is
//!   `x_{t+1}[i] x_t[j]`, so the regressed matrix `M` satisfies
//!   `E[y_t y_{t+1} | x] = x_{t+1}^T M x_t` with `M = A Sigma_inf`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, max_asymmetry, sym_eigenvalues};
use crate::simulate::Trajectory;

const SYMMETRY_TOL: f64 = 1e-12;
const SINGULAR_REL: f64 = 1e-12;
const SIGMA_FLOOR_REL: f64 = 1e-10;

/// Half-vectorization of a symmetric `dim x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvecVector {
    pub data: DVector<f64>,
    pub dim: usize,
}

impl SvecVector {
    /// Wraps raw coordinates; the length must be a triangular number.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let dim = triangular_root(data.len()).ok_or_else(|| {
            Error::Dimension(format!(
                "svec length {} is not of the form d(d+1)/2",
                data.len()
            ))
        })?;
        Ok(Self {
            data: DVector::from_vec(data),
            dim,
        })
    }
}

pub fn svec_len(d: usize) -> usize {
    d * (d + 1) / 2
}

fn triangular_root(n: usize) -> Option<usize> {
    let d = (((8 * n + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d..=d + 1).find(|&k| svec_len(k) == n)
}

pub fn svec(m: &DMatrix<f64>) -> Result<SvecVector> {
    let d = linalg::ensure_square(m, "svec input")?;
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::Validation(format!(
            "svec input is not symmetric: max |M - M^T| = {asym:e}"
        )));
    }
    let mut data = Vec::with_capacity(svec_len(d));
    for i in 0..d {
        data.push(m[(i, i)]);
        for j in (i + 1)..d {
            data.push(std::f64::consts::SQRT_2 * m[(i, j)]);
        }
    }
    Ok(SvecVector {
        data: DVector::from_vec(data),
        dim: d,
    })
}

pub fn svec_inv(v: &SvecVector) -> Result<DMatrix<f64>> {
    let d = v.dim;
    if v.data.len() != svec_len(d) {
        return Err(Error::Dimension(format!(
            "svec of a {d}x{d} matrix has {} entries, got {}",
            svec_len(d),
            v.data.len()
        )));
    }
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        m[(i, i)] = v.data[k];
        k += 1;
        for j in (i + 1)..d {
            let off = v.data[k] / std::f64::consts::SQRT_2;
            m[(i, j)] = off;
            m[(j, i)] = off;
            k += 1;
        }
    }
    Ok(m)
}

/// `svec(x x^T)` written into `out`.
fn outer_svec(x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let mut k = 0;
    for i in 0..d {
        out[k] = x[i] * x[i];
        k += 1;
        for j in (i + 1)..d {
            out[k] = std::f64::consts::SQRT_2 * x[i] * x[j];
            k += 1;
        }
    }
}

fn row_vec(traj: &Trajectory, t: usize) -> Vec<f64> {
    traj.xs.row(t).iter().copied().collect()
}

/// Rows `svec(x_t x_t^T)`; targets `y_t^2 - sigma_eps^2`, or `y_t^2` when the
/// noise level is unknown and is to be absorbed by an intercept.
pub fn build_sym_design(
    traj: &Trajectory,
    sigma_eps_known: Option<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let (n, d) = (traj.len(), traj.dim());
    let k = svec_len(d);
    let offset = sigma_eps_known.map_or(0.0, |s| s * s);
    let mut features = DMatrix::zeros(n, k);
    let mut targets = DVector::zeros(n);
    let mut buf = vec![0.0; k];
    for t in 0..n {
        outer_svec(&row_vec(traj, t), &mut buf);
        for (c, v) in buf.iter().enumerate() {
            features[(t, c)] = *v;
        }
        targets[t] = traj.ys[t] * traj.ys[t] - offset;
    }
    (features, targets)
}

/// Rows `vec(x_{t+1} x_t^T)` (column-major); targets `y_t y_{t+1}`.
pub fn build_cross_design(traj: &Trajectory) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (n, d) = (traj.len(), traj.dim());
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mut features = DMatrix::zeros(n - 1, d * d);
    let mut targets = DVector::zeros(n - 1);
    for t in 0..n - 1 {
        for j in 0..d {
            for i in 0..d {
                features[(t, i + j * d)] = traj.xs[(t + 1, i)] * traj.xs[(t, j)];
            }
        }
        targets[t] = traj.ys[t] * traj.ys[t + 1];
    }
    Ok((features, targets))
}

/// Ordinary least squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    pub intercept: Option<f64>,
    /// Smallest eigenvalue of the (uncentered) feature Gram matrix `sum phi phi^T`.
    pub gram_lambda_min: f64,
    pub residual_mean: f64,
}

/// Householder-QR least squares. Rank deficiency is an error, never a
/// minimum-norm solution.
pub fn least_squares_solve(
    features: &DMatrix<f64>,
    targets: &DVector<f64>,
    with_intercept: bool,
) -> Result<LeastSquares> {
    let (n, k) = features.shape();
    if targets.len() != n {
        return Err(Error::Dimension(format!(
            "{n} feature rows but {} targets",
            targets.len()
        )));
    }
    let kk = k + usize::from(with_intercept);
    if n < kk || kk == 0 {
        return Err(Error::InsufficientData {
            needed: kk.max(1),
            got: n,
        });
    }
    let design = if with_intercept {
        features.clone().insert_column(k, 1.0)
    } else {
        features.clone()
    };

    let gram = design.tr_mul(&design);
    let threshold = SINGULAR_REL * gram.trace() / kk as f64;
    let lmin = linalg::lambda_min_sym(&gram);
    if lmin <= threshold {
        return Err(Error::SingularDesign {
            lambda_min: lmin,
            threshold,
        });
    }
    let gram_lambda_min = if with_intercept {
        linalg::lambda_min_sym(&features.tr_mul(features))
    } else {
        lmin
    };

    let qr = design.clone().qr();
    let mut rotated = targets.clone();
    qr.q_tr_mul(&mut rotated);
    let r = qr.r();
    let sol = r
        .solve_upper_triangular(&rotated.rows(0, kk).into_owned())
        .ok_or(Error::SingularDesign {
            lambda_min: lmin,
            threshold,
        })?;
    let residual_mean = (targets - &design * &sol).mean();
    let (coefficients, intercept) = if with_intercept {
        (sol.rows(0, k).into_owned(), Some(sol[k]))
    } else {
        (sol, None)
    };
    Ok(LeastSquares {
        coefficients,
        intercept,
        gram_lambda_min,
        residual_mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignDiagnostics {
    pub lambda_min_sym: f64,
    pub lambda_min_cross: f64,
    pub lambda_min_sigma_hat: f64,
    pub condition_sigma_hat: f64,
    pub residual_mean_sym: f64,
    pub residual_mean_cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CMEstimate {
    #[serde(with = "linalg::serde_rows")]
    pub sigma_hat: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub m_hat: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub a_hat: DMatrix<f64>,
    pub sigma_eps_sq_hat: Option<f64>,
    #[serde(rename = "diagnostics")]
    pub diag: DesignDiagnostics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CmOptions {
    /// Known observation-noise standard deviation; `None` fits an intercept.
    pub sigma_eps: Option<f64>,
    /// Floor the eigenvalues of the covariance estimate before solving for `A`.
    pub clip_eigenvalues: bool,
}

pub fn estimate_cm(traj: &Trajectory, sigma_eps_known: Option<f64>) -> Result<CMEstimate> {
    estimate_cm_with(
        traj,
        &CmOptions {
            sigma_eps: sigma_eps_known,
            clip_eigenvalues: false,
        },
    )
}

pub fn estimate_cm_with(traj: &Trajectory, opts: &CmOptions) -> Result<CMEstimate> {
    let (n, d) = (traj.len(), traj.dim());
    if let Some(s) = opts.sigma_eps {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma_eps must be nonnegative, got {s}"
            )));
        }
    }
    let with_intercept = opts.sigma_eps.is_none();
    let needed = (svec_len(d) + usize::from(with_intercept)).max(d * d + 1);
    if n < needed {
        return Err(Error::InsufficientData { needed, got: n });
    }

    let (sym_x, sym_y) = build_sym_design(traj, opts.sigma_eps);
    let sym = least_squares_solve(&sym_x, &sym_y, with_intercept)?;
    let sigma_hat = svec_inv(&SvecVector {
        data: sym.coefficients.clone(),
        dim: d,
    })?;

    let (cross_x, cross_y) = build_cross_design(traj)?;
    let cross = least_squares_solve(&cross_x, &cross_y, false)?;
    let m_hat = linalg::unvec_col_major(cross.coefficients.as_slice(), d, d);

    let eig = sym_eigenvalues(&sigma_hat);
    let (lmin, lmax) = (eig[0], eig[d - 1]);
    let floor = SIGMA_FLOOR_REL * sigma_hat.trace() / d as f64;
    let solve_against = if opts.clip_eigenvalues {
        let e = sigma_hat.clone().symmetric_eigen();
        let floored = e.eigenvalues.map(|l| l.max(floor));
        &e.eigenvectors * DMatrix::from_diagonal(&floored) * e.eigenvectors.transpose()
    } else {
        if lmin <= floor {
            return Err(Error::NearSingularSigma {
                lambda_min: lmin,
                floor,
            });
        }
        sigma_hat.clone()
    };
    let a_hat = linalg::solve_right(&solve_against, &m_hat).ok_or(Error::NearSingularSigma {
        lambda_min: lmin,
        floor,
    })?;

    let abs_eig: Vec<f64> = eig.iter().map(|l| l.abs()).collect();
    let condition = abs_eig.iter().copied().fold(0.0, f64::max)
        / abs_eig.iter().copied().fold(f64::INFINITY, f64::min);

    Ok(CMEstimate {
        sigma_hat,
        m_hat,
        a_hat,
        sigma_eps_sq_hat: sym.intercept.map(|c| c.max(0.0)),
        diag: DesignDiagnostics {
            lambda_min_sym: sym.gram_lambda_min,
            lambda_min_cross: cross.gram_lambda_min,
            lambda_min_sigma_hat: lmin,
            condition_sigma_hat: if lmax == 0.0 {
                f64::INFINITY
            } else {
                condition
            },
            residual_mean_sym: sym.residual_mean,
            residual_mean_cross: cross.residual_mean,
        },
    })
}

/// Lag-`h` autocorrelations, `h = 0..=max_lag`, of the symmetric-design residuals
/// `y_t^2 - x_t^T Sigma_hat x_t - sigma_eps^2`.
pub fn residual_autocorrelation(
    traj: &Trajectory,
    est: &CMEstimate,
    sigma_eps: f64,
    max_lag: usize,
) -> Result<Vec<f64>> {
    let n = traj.len();
    if max_lag >= n {
        return Err(Error::Domain(format!(
            "max_lag {max_lag} must be below T = {n}"
        )));
    }
    let resid: Vec<f64> = (0..n)
        .map(|t| {
            let x = traj.x(t);
            traj.ys[t] * traj.ys[t]
                - (x.transpose() * &est.sigma_hat * &x)[0]
                - sigma_eps * sigma_eps
        })
        .collect();
    let mean = resid.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = resid.iter().map(|r| r - mean).collect();
    let denom: f64 = centered.iter().map(|r| r * r).sum();
    if denom <= 0.0 {
        return Err(Error::Domain("residuals are constant".into()));
    }
    Ok((0..=max_lag)
        .map(|h| {
            centered[..n - h]
                .iter()
                .zip(&centered[h..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom
        })
        .collect())
}
