//! Independent oracles shared by the integration and acceptance tests. Nothing
//! here calls into the library's numerical routines.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tvlds_core::Trajectory;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn max_abs_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Gaussian entries rescaled to a spectral radius drawn from `[0.1, rho_max]`.
pub fn random_stable<R: Rng>(rng: &mut R, d: usize, rho_max: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, d, d);
    let target = rng.random_range(0.1..rho_max);
    let rho = max_abs_eigenvalue(&a);
    a * (target / rho)
}

/// `G G^T / d + 0.1 I`.
pub fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, d, d);
    &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1
}

pub fn random_symmetric<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, d, d);
    (&g + g.transpose()) * 0.5
}

/// Orthogonal factor of a Gaussian matrix via modified Gram-Schmidt.
pub fn random_orthogonal<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let mut q = gaussian_matrix(rng, d, d);
    for j in 0..d {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let ck = q.column(k).clone_owned();
            let mut cj = q.column_mut(j);
            cj -= ck * proj;
        }
        let n = q.column(j).norm();
        q.column_mut(j).unscale_mut(n);
    }
    q
}

/// `sum_j A^j W (A^j)^T`, stopped once a term's Frobenius norm falls below 1e-18.
pub fn lyapunov_series(a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sum = w.clone();
    let mut term = w.clone();
    for _ in 0..100_000 {
        term = a * &term * a.transpose();
        sum += &term;
        if term.norm() < 1e-18 {
            break;
        }
    }
    sum
}

/// `(X^T X)^{-1} X^T y` through an explicit inverse.
pub fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let gram = x.transpose() * x;
    gram.try_inverse().expect("invertible gram") * (x.transpose() * y)
}

/// Posterior moments of `(beta_0..beta_{T-1})` from one dense Gaussian
/// conditioning on `y`, plus the filter quantities obtained by conditioning on
/// prefixes of `y`.
pub struct DenseGaussian {
    pub pred_means: Vec<DVector<f64>>,
    pub pred_covs: Vec<DMatrix<f64>>,
    pub filt_means: Vec<DVector<f64>>,
    pub filt_covs: Vec<DMatrix<f64>>,
    pub smooth_means: Vec<DVector<f64>>,
    pub smooth_covs: Vec<DMatrix<f64>>,
    /// `Cov(beta_{t+1}, beta_t | y)`.
    pub lag_one: Vec<DMatrix<f64>>,
    pub loglik: f64,
    /// Full posterior covariance of the stacked states.
    pub joint_cov: DMatrix<f64>,
    pub joint_mean: DVector<f64>,
}

fn mat_pow(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut p = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        p = a * p;
    }
    p
}

fn condition(
    mu_b: &DVector<f64>,
    s_bb: &DMatrix<f64>,
    s_by: &DMatrix<f64>,
    s_yy: &DMatrix<f64>,
    resid: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    if s_yy.nrows() == 0 {
        return (mu_b.clone(), s_bb.clone());
    }
    let inv = s_yy
        .clone()
        .try_inverse()
        .expect("invertible observation covariance");
    let mean = mu_b + s_by * &inv * resid;
    let cov = s_bb - s_by * &inv * s_by.transpose();
    (mean, cov)
}

pub fn dense_gaussian(
    traj: &Trajectory,
    a: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_eps: f64,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> DenseGaussian {
    let n = traj.ys.len();
    let d = a.nrows();
    let nd = n * d;

    let mut means = Vec::with_capacity(n);
    let mut marg = Vec::with_capacity(n);
    means.push(m0.clone());
    marg.push(p0.clone());
    for t in 1..n {
        means.push(a * &means[t - 1]);
        marg.push(a * &marg[t - 1] * a.transpose() + sigma_w);
    }
    let mut mu = DVector::zeros(nd);
    let mut cov = DMatrix::zeros(nd, nd);
    for s in 0..n {
        mu.rows_mut(s * d, d).copy_from(&means[s]);
        for t in 0..=s {
            let block = mat_pow(a, s - t) * &marg[t];
            cov.view_mut((s * d, t * d), (d, d)).copy_from(&block);
            cov.view_mut((t * d, s * d), (d, d))
                .copy_from(&block.transpose());
        }
    }
    let mut h = DMatrix::zeros(n, nd);
    for t in 0..n {
        for i in 0..d {
            h[(t, t * d + i)] = traj.xs[(t, i)];
        }
    }
    let mu_y = &h * &mu;
    let cov_by = &cov * h.transpose();
    let cov_yy = &h * &cov * h.transpose() + DMatrix::identity(n, n) * sigma_eps * sigma_eps;
    let resid = &traj.ys - &mu_y;

    let prefix = |t: usize, k: usize| {
        let mb = mu.rows(t * d, d).clone_owned();
        let sbb = cov.view((t * d, t * d), (d, d)).clone_owned();
        let sby = cov_by.view((t * d, 0), (d, k)).clone_owned();
        let syy = cov_yy.view((0, 0), (k, k)).clone_owned();
        let r = resid.rows(0, k).clone_owned();
        condition(&mb, &sbb, &sby, &syy, &r)
    };
    let mut out = DenseGaussian {
        pred_means: vec![],
        pred_covs: vec![],
        filt_means: vec![],
        filt_covs: vec![],
        smooth_means: vec![],
        smooth_covs: vec![],
        lag_one: vec![],
        loglik: 0.0,
        joint_cov: DMatrix::zeros(0, 0),
        joint_mean: DVector::zeros(0),
    };
    for t in 0..n {
        let (m, p) = prefix(t, t);
        out.pred_means.push(m);
        out.pred_covs.push(p);
        let (m, p) = prefix(t, t + 1);
        out.filt_means.push(m);
        out.filt_covs.push(p);
    }
    let (jm, jc) = condition(&mu, &cov, &cov_by, &cov_yy, &resid);
    for t in 0..n {
        out.smooth_means.push(jm.rows(t * d, d).clone_owned());
        out.smooth_covs
            .push(jc.view((t * d, t * d), (d, d)).clone_owned());
        if t + 1 < n {
            out.lag_one
                .push(jc.view(((t + 1) * d, t * d), (d, d)).clone_owned());
        }
    }
    let chol = cov_yy
        .clone()
        .cholesky()
        .expect("positive definite observation covariance");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = resid.dot(&chol.solve(&resid));
    out.loglik = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
    out.joint_cov = jc;
    out.joint_mean = jm;
    out
}

/// One EM update of `A` from the dense posterior: sums of second moments, then
/// an explicit inverse.
pub fn dense_em_update(post: &DenseGaussian, d: usize) -> DMatrix<f64> {
    let n = post.smooth_means.len();
    let mut cross = DMatrix::zeros(d, d);
    let mut gram = DMatrix::zeros(d, d);
    for t in 1..n {
        let mt = &post.smooth_means[t];
        let mp = &post.smooth_means[t - 1];
        cross += post.joint_cov.view((t * d, (t - 1) * d), (d, d)) + mt * mp.transpose();
        gram += post.joint_cov.view(((t - 1) * d, (t - 1) * d), (d, d)) + mp * mp.transpose();
    }
    cross * gram.try_inverse().expect("invertible state gram")
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Random trajectory from a small stable model, built without the simulator.
pub fn small_trajectory<R: Rng>(
    rng: &mut R,
    a: &DMatrix<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_eps: f64,
    n: usize,
) -> Trajectory {
    let d = a.nrows();
    let lw = sigma_w.clone().cholesky().expect("spd sigma_w").l();
    let mut beta = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut xs = DMatrix::zeros(n, d);
    let mut ys = DVector::zeros(n);
    for t in 0..n {
        let x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e: f64 = rng.sample(StandardNormal);
        ys[t] = x.dot(&beta) + sigma_eps * e;
        xs.set_row(t, &x.transpose());
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        beta = a * beta + &lw * z;
    }
    Trajectory::new(xs, ys, None).unwrap()
}
