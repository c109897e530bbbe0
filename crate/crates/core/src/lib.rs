//! Identification of the latent linear dynamics that drive the coefficients of
//! a time-varying linear regression
//!
//! ```text
//! beta_{t+1} = A beta_t + w_t,     w_t ~ N(0, sigma_w)
//! y_t        = x_t^T beta_t + eps_t, eps_t ~ N(0, sigma_eps^2), x_t ~ N(0, I)
//! ```
//!
//! * [`cm`]: the covariance method, two least-squares fits and one solve.
//! * [`em`]: Kalman filter, RTS smoother and EM for `A`.
//! * [`baseline`]: least squares when the states are observed.
//! * [`model`]: stationary covariance, spectral radius, the Gelfand constant and
//!   the finite-sample bounds.
//! * [`simulate`]: seeded trajectories.
//! * [`bench`]: the Monte Carlo rate harness behind the `tvlds bench` command.

pub mod baseline;
pub mod bench;
pub mod cm;
pub mod em;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod simulate;

pub use baseline::ols_full_state;
pub use bench::{
    fit_rate_slope, parse_config, run_experiment, write_outputs, Estimator, ExperimentConfig,
    RateSummary, TrialRecord,
};
pub use cm::{estimate_cm, least_squares_solve, svec, svec_inv, CMEstimate, SvecVector};
pub use em::{em_fit, em_step, kalman_filter, rts_smoother, EMEstimate, EmOptions, PriorMode};
pub use error::{Error, Result};
pub use model::{
    gelfand_tau, lyapunov_solve, spectral_radius, theoretical_bound, validate_params,
    StationarySolution, SystemParams, TheoryBound,
};
pub use simulate::{gaussian_vector, simulate_trajectory, Trajectory};
