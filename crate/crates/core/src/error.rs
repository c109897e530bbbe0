use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameters: {0}")]
    Validation(String),

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("system is not stable: spectral radius {spectral_radius} >= 1")]
    Unstable { spectral_radius: f64 },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("iteration did not converge: {0}")]
    NonConvergence(String),

    #[error("insufficient data: need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("singular design: gram lambda_min {lambda_min:e} <= threshold {threshold:e}")]
    SingularDesign { lambda_min: f64, threshold: f64 },

    #[error("estimated stationary covariance is near singular: lambda_min {lambda_min:e} <= floor {floor:e}")]
    NearSingularSigma { lambda_min: f64, floor: f64 },

    #[error("innovation variance {variance:e} at t={t} is not positive")]
    DegenerateInnovation { t: usize, variance: f64 },

    #[error("predicted covariance at t={t} is singular")]
    DegeneratePrediction { t: usize },

    #[error("M-step state Gram is singular (lambda_min {lambda_min:e})")]
    DegenerateMStep { lambda_min: f64 },

    #[error("malformed data: {0}")]
    Parse(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used for the `status` column of trial records.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Validation(_) => "validation",
            Error::Config { .. } => "config",
            Error::Unstable { .. } => "unstable",
            Error::Domain(_) => "domain",
            Error::NonConvergence(_) => "non_convergence",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::SingularDesign { .. } => "singular_design",
            Error::NearSingularSigma { .. } => "near_singular_sigma",
            Error::DegenerateInnovation { .. } => "degenerate_innovation",
            Error::DegeneratePrediction { .. } => "degenerate_prediction",
            Error::DegenerateMStep { .. } => "degenerate_mstep",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the CLI: 2 config/validation, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Validation(_)
            | Error::Config { .. }
            | Error::Domain(_)
            | Error::Parse(_) => 2,
            Error::Io { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
