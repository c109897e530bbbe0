//! System description, stability analysis, stationary covariance and the
//! finite-sample bound evaluator for the covariance method.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ensure_square, lambda_min_sym, max_asymmetry, operator_norm};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const GELFAND_MAX_POWER: usize = 100_000;

/// Ground truth for the data-generating process
/// `beta_{t+1} = A beta_t + w_t`, `y_t = x_t^T beta_t + eps_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    #[serde(rename = "A", with = "linalg::serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub sigma_w: DMatrix<f64>,
    pub sigma_eps: f64,
}

impl SystemParams {
    pub fn new(a: DMatrix<f64>, sigma_w: DMatrix<f64>, sigma_eps: f64) -> Result<Self> {
        validate_params(SystemParams {
            a,
            sigma_w,
            sigma_eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Checks every structural invariant of [`SystemParams`].
///
/// A `sigma_w` whose asymmetry is within `1e-12` is replaced by its symmetric part;
/// anything else is returned as-is.
pub fn validate_params(mut params: SystemParams) -> Result<SystemParams> {
    let d = params.a.nrows();
    if d == 0 {
        return Err(Error::Validation("A must be non-empty".into()));
    }
    ensure_square(&params.a, "A")?;
    if params.sigma_w.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "sigma_w is {}x{}, expected {d}x{d}",
            params.sigma_w.nrows(),
            params.sigma_w.ncols()
        )));
    }
    if params
        .a
        .iter()
        .chain(params.sigma_w.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Validation("A and sigma_w must be finite".into()));
    }
    if !params.sigma_eps.is_finite() || params.sigma_eps < 0.0 {
        return Err(Error::Validation(format!(
            "sigma_eps must be nonnegative, got {}",
            params.sigma_eps
        )));
    }
    let asym = max_asymmetry(&params.sigma_w);
    if asym > SYMMETRY_TOL {
        return Err(Error::Validation(format!(
            "sigma_w is not symmetric: max |S - S^T| = {asym:e}"
        )));
    }
    if asym > 0.0 {
        params.sigma_w = linalg::symmetrize(&params.sigma_w);
    }
    let lmin = lambda_min_sym(&params.sigma_w);
    if lmin < -PSD_TOL {
        return Err(Error::Validation(format!(
            "sigma_w is not positive semidefinite: lambda_min = {lmin:e}"
        )));
    }
    Ok(params)
}

/// Maximum eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    let d = ensure_square(a, "A")?;
    if d == 0 {
        return Ok(0.0);
    }
    Ok(a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Stationary covariance of the state process.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarySolution {
    pub sigma_inf: DMatrix<f64>,
    pub spectral_radius: f64,
}

/// Solves `P = A P A^T + sigma_w` through the `d^2 x d^2` Kronecker system
/// `(I - A (x) A) vec(P) = vec(sigma_w)`, then symmetrizes.
pub fn lyapunov_solve(a: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> Result<StationarySolution> {
    let d = ensure_square(a, "A")?;
    if sigma_w.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "sigma_w must be {d}x{d}, got {}x{}",
            sigma_w.nrows(),
            sigma_w.ncols()
        )));
    }
    let asym = max_asymmetry(sigma_w);
    if asym > SYMMETRY_TOL {
        return Err(Error::Validation(format!(
            "sigma_w is not symmetric: max |S - S^T| = {asym:e}"
        )));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable {
            spectral_radius: rho,
        });
    }
    let system = DMatrix::<f64>::identity(d * d, d * d) - a.kronecker(a);
    let rhs = linalg::vec_col_major(sigma_w);
    let sol = system.lu().solve(&rhs).ok_or(Error::Unstable {
        spectral_radius: rho,
    })?;
    let p = linalg::unvec_col_major(sol.as_slice(), d, d);
    Ok(StationarySolution {
        sigma_inf: linalg::symmetrize(&p),
        spectral_radius: rho,
    })
}

/// `sup_{k >= 0} ||A^k|| gamma^{-k}`.
///
/// Powers of `A / gamma` are accumulated directly. The scan stops at the first
/// `k >= 1` whose term is at most 1: writing any later power as `q k + r` with
/// `r < k`, submultiplicativity bounds it by a term already seen.
pub fn gelfand_tau(a: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    let d = ensure_square(a, "A")?;
    let rho = spectral_radius(a)?;
    check_gamma(rho, gamma)?;
    let scaled = a / gamma;
    let mut power = DMatrix::<f64>::identity(d, d);
    let mut sup = 1.0_f64;
    for _ in 1..=GELFAND_MAX_POWER {
        power = &power * &scaled;
        let term = operator_norm(&power);
        sup = sup.max(term);
        if term <= 1.0 {
            return Ok(sup);
        }
    }
    Err(Error::NonConvergence(format!(
        "gelfand constant scan exceeded {GELFAND_MAX_POWER} powers (rho = {rho}, gamma = {gamma})"
    )))
}

fn check_gamma(rho: f64, gamma: f64) -> Result<()> {
    if !(gamma > rho && gamma < 1.0) {
        return Err(Error::Domain(format!(
            "gamma must lie in (rho(A), 1) = ({rho}, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// Evaluated finite-sample bounds, up to the unspecified universal constant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryBound {
    pub gamma: f64,
    pub tau: f64,
    pub c_convention: f64,
    pub bound_sigma: f64,
    pub bound_cross: f64,
    #[serde(rename = "bound_A")]
    pub bound_a: f64,
    #[serde(rename = "min_T")]
    pub min_t: f64,
}

/// Separate values for each place the universal constant appears.
///
/// [`theoretical_bound`] uses one value everywhere; splitting them lets callers
/// study each occurrence on its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    /// Constant under the square root in all three error bounds.
    pub radical: f64,
    /// Constant multiplying the corollary's error bound.
    pub prefactor: f64,
    /// Constant in the corollary's sample-size threshold.
    pub threshold: f64,
}

impl BoundConstants {
    pub fn uniform(c: f64) -> Self {
        Self {
            radical: c,
            prefactor: c,
            threshold: c,
        }
    }
}

pub fn theoretical_bound(
    params: &SystemParams,
    stat: &StationarySolution,
    t: usize,
    delta: f64,
    gamma: f64,
    c_convention: f64,
) -> Result<TheoryBound> {
    theoretical_bound_with(
        params,
        stat,
        t,
        delta,
        gamma,
        BoundConstants::uniform(c_convention),
    )
}

pub fn theoretical_bound_with(
    params: &SystemParams,
    stat: &StationarySolution,
    t: usize,
    delta: f64,
    gamma: f64,
    consts: BoundConstants,
) -> Result<TheoryBound> {
    if t == 0 {
        return Err(Error::Domain("T must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    for (name, c) in [
        ("radical", consts.radical),
        ("prefactor", consts.prefactor),
        ("threshold", consts.threshold),
    ] {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!(
                "constant `{name}` must be positive, got {c}"
            )));
        }
    }
    let tau = gelfand_tau(&params.a, gamma)?;
    let d = params.dim() as f64;
    let sigma_norm = operator_norm(&stat.sigma_inf);
    let lmin = lambda_min_sym(&stat.sigma_inf);
    if lmin <= 0.0 {
        return Err(Error::Domain(format!(
            "stationary covariance must be positive definite, lambda_min = {lmin:e}"
        )));
    }
    let a_norm = operator_norm(&params.a);
    let s4 = params.sigma_eps.powi(4);
    let mixing = sigma_norm * sigma_norm / (1.0 - gamma * gamma);

    // bracketed term; `log_scale` is 1 in the theorem and 4 in the corollary
    let bracket = |tt: f64, tau_pow: i32, log_scale: f64| {
        let l = (2.0 * tt / delta).ln();
        s4 + tau.powi(tau_pow) * mixing * (d * d + log_scale * l * l)
    };
    let tf = t as f64;
    let radical = |tau_pow: i32, log_scale: f64| {
        (consts.radical * d * d / (tf * delta) * bracket(tf, tau_pow, log_scale)).sqrt()
    };

    let bound_sigma = radical(2, 1.0);
    let bound_cross = radical(3, 1.0);
    let bound_a = consts.prefactor * (1.0 + a_norm) / lmin * radical(3, 4.0);

    let threshold =
        |tt: f64| consts.threshold * d * d / (lmin * lmin * delta) * bracket(tt, 3, 4.0);
    let min_t = smallest_fixed_point(threshold)?;

    Ok(TheoryBound {
        gamma,
        tau,
        c_convention: consts.radical,
        bound_sigma,
        bound_cross,
        bound_a,
        min_t,
    })
}

/// Smallest `T >= 1` with `T >= f(T)` for a nondecreasing `f` of log-polynomial
/// growth. Iterating `T <- f(T)` from below climbs monotonically onto it.
fn smallest_fixed_point(f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut t = 1.0_f64;
    for _ in 0..10_000 {
        let next = f(t);
        if !next.is_finite() {
            return Err(Error::NonConvergence(
                "sample-size threshold diverged".into(),
            ));
        }
        if next <= t {
            return Ok(t);
        }
        if (next - t) <= 1e-12 * next {
            return Ok(next);
        }
        t = next;
    }
    Err(Error::NonConvergence(
        "sample-size threshold iteration did not settle".into(),
    ))
}
