//! Expectation-maximization baseline for the transition matrix.
//!
//! The E-step runs a Kalman filter specialised to scalar observations
//! `y_t = x_t^T beta_t + eps_t` followed by a Rauch-Tung-Striebel smoother with
//! lag-one covariances. The M-step sets
//! `A <- (sum_{t=1}^{T-1} S_{t,t-1}) (sum_{t=1}^{T-1} S_{t-1})^{-1}` with
//! `S_t = E[beta_t beta_t^T | data]` and `S_{t,t-1} = E[beta_t beta_{t-1}^T | data]`.
//! Only `A` is estimated; `sigma_w` and `sigma_eps` are supplied.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, lambda_min_sym, symmetrize};
use crate::model::{lyapunov_solve, spectral_radius};
use crate::simulate::Trajectory;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FALLBACK_PRIOR_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// `E[beta_t | y_{0:t-1}]`.
    pub pred_means: Vec<DVector<f64>>,
    pub pred_covs: Vec<DMatrix<f64>>,
    /// `E[beta_t | y_{0:t}]`.
    pub filt_means: Vec<DVector<f64>>,
    pub filt_covs: Vec<DMatrix<f64>>,
    /// Exact Gaussian log-likelihood of `y_{0:T-1}` given the features.
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherResult {
    pub smooth_means: Vec<DVector<f64>>,
    pub smooth_covs: Vec<DMatrix<f64>>,
    /// `lag_one_covs[t] = Cov(beta_{t+1}, beta_t | all data)`.
    pub lag_one_covs: Vec<DMatrix<f64>>,
    /// `E[beta_t beta_t^T | all data]`.
    pub s_t: Vec<DMatrix<f64>>,
    /// `s_t_tm1[t-1] = E[beta_t beta_{t-1}^T | all data]` for `t = 1..T-1`.
    pub s_t_tm1: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EMEstimate {
    #[serde(with = "linalg::serde_rows")]
    pub a_hat: DMatrix<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(with = "linalg::serde_rows")]
    pub init: DMatrix<f64>,
}

fn check_dims(traj: &Trajectory, a: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> Result<usize> {
    let d = traj.dim();
    if a.shape() != (d, d) || sigma_w.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "A is {:?} and sigma_w is {:?}, expected {d}x{d}",
            a.shape(),
            sigma_w.shape()
        )));
    }
    Ok(d)
}

pub fn kalman_filter(
    traj: &Trajectory,
    a: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_eps: f64,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<FilterResult> {
    let d = check_dims(traj, a, sigma_w)?;
    if init_mean.len() != d || init_cov.shape() != (d, d) {
        return Err(Error::Dimension("initial state has the wrong size".into()));
    }
    let n = traj.len();
    let noise_var = sigma_eps * sigma_eps;
    let mut out = FilterResult {
        pred_means: Vec::with_capacity(n),
        pred_covs: Vec::with_capacity(n),
        filt_means: Vec::with_capacity(n),
        filt_covs: Vec::with_capacity(n),
        loglik: 0.0,
    };
    let mut mean = init_mean.clone();
    let mut cov = symmetrize(init_cov);
    for t in 0..n {
        let x = traj.x(t);
        let px = &cov * &x;
        let s = x.dot(&px) + noise_var;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateInnovation { t, variance: s });
        }
        let innov = traj.ys[t] - x.dot(&mean);
        let gain = &px / s;
        let f_mean = &mean + &gain * innov;
        let f_cov = symmetrize(&(&cov - &gain * px.transpose()));
        out.loglik -= 0.5 * (LN_2PI + s.ln() + innov * innov / s);

        let next_mean = a * &f_mean;
        let next_cov = symmetrize(&(a * &f_cov * a.transpose() + sigma_w));
        out.pred_means.push(std::mem::replace(&mut mean, next_mean));
        out.pred_covs.push(std::mem::replace(&mut cov, next_cov));
        out.filt_means.push(f_mean);
        out.filt_covs.push(f_cov);
    }
    Ok(out)
}

/// Backward pass. `a` must be the transition matrix the filter ran with.
pub fn rts_smoother(filter: &FilterResult, a: &DMatrix<f64>) -> Result<SmootherResult> {
    let n = filter.filt_means.len();
    if n == 0 {
        return Ok(SmootherResult {
            smooth_means: vec![],
            smooth_covs: vec![],
            lag_one_covs: vec![],
            s_t: vec![],
            s_t_tm1: vec![],
        });
    }
    let mut means = filter.filt_means.clone();
    let mut covs = filter.filt_covs.clone();
    let mut lag_one = vec![DMatrix::zeros(0, 0); n - 1];
    for t in (0..n - 1).rev() {
        let pred = &filter.pred_covs[t + 1];
        let cross = &filter.filt_covs[t] * a.transpose();
        // an all-zero prediction forces the cross term to zero too, so the gain is 0
        let gain = if pred.iter().all(|&v| v == 0.0) {
            DMatrix::zeros(cross.nrows(), cross.ncols())
        } else {
            linalg::solve_right(pred, &cross).ok_or(Error::DegeneratePrediction { t: t + 1 })?
        };
        if gain.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegeneratePrediction { t: t + 1 });
        }
        let m = &filter.filt_means[t] + &gain * (&means[t + 1] - &filter.pred_means[t + 1]);
        let p = &filter.filt_covs[t] + &gain * (&covs[t + 1] - pred) * gain.transpose();
        lag_one[t] = &covs[t + 1] * gain.transpose();
        means[t] = m;
        covs[t] = symmetrize(&p);
    }
    let s_t: Vec<DMatrix<f64>> = means
        .iter()
        .zip(&covs)
        .map(|(m, p)| p + m * m.transpose())
        .collect();
    let s_t_tm1 = (1..n)
        .map(|t| &lag_one[t - 1] + &means[t] * means[t - 1].transpose())
        .collect();
    Ok(SmootherResult {
        smooth_means: means,
        smooth_covs: covs,
        lag_one_covs: lag_one,
        s_t,
        s_t_tm1,
    })
}

/// Filter prior used for an EM iterate: the stationary law of `a` when it is
/// stable, otherwise a broad isotropic prior.
pub fn em_prior(a: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = a.nrows();
    let mean = DVector::zeros(d);
    if let Ok(stat) = lyapunov_solve(a, sigma_w) {
        return (mean, stat.sigma_inf);
    }
    let scale = FALLBACK_PRIOR_SCALE * sigma_w.trace();
    (mean, DMatrix::identity(d, d) * scale)
}

/// One E-step plus M-step. Returns the updated matrix and the log-likelihood
/// of `a_current`.
pub fn em_step(
    traj: &Trajectory,
    a_current: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_eps: f64,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let d = check_dims(traj, a_current, sigma_w)?;
    if traj.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: traj.len(),
        });
    }
    let filt = kalman_filter(traj, a_current, sigma_w, sigma_eps, init_mean, init_cov)?;
    let smooth = rts_smoother(&filt, a_current)?;
    let n = traj.len();
    let cross: DMatrix<f64> = smooth
        .s_t_tm1
        .iter()
        .fold(DMatrix::zeros(d, d), |acc, s| acc + s);
    let gram: DMatrix<f64> = smooth.s_t[..n - 1]
        .iter()
        .fold(DMatrix::zeros(d, d), |acc, s| acc + s);
    let gram = symmetrize(&gram);
    let lmin = lambda_min_sym(&gram);
    if lmin <= 1e-12 * gram.trace().abs() / d as f64 || gram.trace() <= 0.0 {
        return Err(Error::DegenerateMStep { lambda_min: lmin });
    }
    let next =
        linalg::solve_right(&gram, &cross).ok_or(Error::DegenerateMStep { lambda_min: lmin })?;
    Ok((next, filt.loglik))
}

/// Which filter prior each EM iterate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorMode {
    /// `em_prior(A_init)` for the whole run. The prior does not depend on the
    /// iterate, so every step is an exact EM step and the likelihood ascends.
    #[default]
    FixedAtInit,
    /// `em_prior(A_k)` at iterate `k`. Tracks the stationary law of the current
    /// guess, but the M-step ignores that dependence and ascent can fail.
    PerIterate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once `||A_{k+1} - A_k||_F < tol`.
    pub tol: f64,
    pub prior: PriorMode,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-6,
            prior: PriorMode::FixedAtInit,
        }
    }
}

pub fn em_fit(
    traj: &Trajectory,
    sigma_w: &DMatrix<f64>,
    sigma_eps: f64,
    a_init: &DMatrix<f64>,
    opts: EmOptions,
) -> Result<EMEstimate> {
    check_dims(traj, a_init, sigma_w)?;
    let mut a = a_init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let fixed = em_prior(a_init, sigma_w);
    while iterations < opts.max_iters {
        let (m0, p0) = match opts.prior {
            PriorMode::FixedAtInit => fixed.clone(),
            PriorMode::PerIterate => em_prior(&a, sigma_w),
        };
        let (next, loglik) = em_step(traj, &a, sigma_w, sigma_eps, &m0, &p0)?;
        trace.push(loglik);
        iterations += 1;
        let step = (&next - &a).norm();
        a = next;
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EMEstimate {
        a_hat: a,
        loglik_trace: trace,
        iterations,
        converged,
        init: a_init.clone(),
    })
}

/// Warm start from a covariance-method estimate, pulled inside the unit
/// circle (spectral radius 0.95) when it is not stable.
pub fn default_em_init(a_cm: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rho = spectral_radius(a_cm)?;
    Ok(if rho >= 1.0 {
        a_cm * (0.95 / rho)
    } else {
        a_cm.clone()
    })
}
