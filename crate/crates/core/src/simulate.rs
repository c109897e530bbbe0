//! Seeded trajectory generation with stationary initialization, plus the
//! trajectory CSV format.
//!
//! Randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`), seeded with
//! `seed_from_u64(seed)` and switched to stream `T`, so the trajectory for a
//! given `(seed, T)` is the same on every platform while trajectories of
//! different lengths under one seed are independent rather than prefixes of
//! each other. Standard normals are drawn with `rand_distr::StandardNormal`.
//!
//! Draw order: `beta_0` (d normals), then for each step `t`: `x_t` (d normals),
//! `eps_t` (1 normal), `w_t` (d normals).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{lambda_min_sym, max_asymmetry, psd_sqrt};
use crate::model::{lyapunov_solve, SystemParams};

const PSD_TOL: f64 = 1e-10;

/// One realized sequence `(x_t, y_t)`, optionally with the hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T x d` features.
    pub xs: DMatrix<f64>,
    /// Length-`T` labels.
    pub ys: DVector<f64>,
    /// `T x d` hidden states, when retained.
    pub betas: Option<DMatrix<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn new(xs: DMatrix<f64>, ys: DVector<f64>, betas: Option<DMatrix<f64>>) -> Result<Self> {
        if xs.nrows() != ys.len() {
            return Err(Error::Dimension(format!(
                "xs has {} rows but ys has {} entries",
                xs.nrows(),
                ys.len()
            )));
        }
        if let Some(b) = &betas {
            if b.shape() != xs.shape() {
                return Err(Error::Dimension(format!(
                    "betas is {}x{}, expected {}x{}",
                    b.nrows(),
                    b.ncols(),
                    xs.nrows(),
                    xs.ncols()
                )));
            }
        }
        Ok(Self {
            xs,
            ys,
            betas,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn x(&self, t: usize) -> DVector<f64> {
        self.xs.row(t).transpose()
    }

    /// Content hash of the observed data (features and labels only), as 16 hex digits.
    pub fn data_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for t in 0..self.len() {
            for j in 0..self.dim() {
                h.update(self.xs[(t, j)].to_bits().to_le_bytes());
            }
            h.update(self.ys[t].to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// CSV with header `t,y,x_0,...,x_{d-1}[,beta_0,...]`, floats at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("t,y");
        for j in 0..d {
            let _ = write!(out, ",x_{j}");
        }
        if self.betas.is_some() {
            for j in 0..d {
                let _ = write!(out, ",beta_{j}");
            }
        }
        out.push('\n');
        for t in 0..self.len() {
            let _ = write!(out, "{t},{}", io::fmt_f64(self.ys[t]));
            for j in 0..d {
                let _ = write!(out, ",{}", io::fmt_f64(self.xs[(t, j)]));
            }
            if let Some(b) = &self.betas {
                for j in 0..d {
                    let _ = write!(out, ",{}", io::fmt_f64(b[(t, j)]));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`Trajectory::to_csv`]. The seed is not
    /// stored in the file and comes back as 0.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "t" || cols[1] != "y" {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        let d = cols[2..].iter().take_while(|c| c.starts_with("x_")).count();
        let n_beta = cols.len() - 2 - d;
        if d == 0 || (n_beta != 0 && n_beta != d) {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        for j in 0..d {
            let (x, b) = (format!("x_{j}"), format!("beta_{j}"));
            if cols[2 + j] != x || (n_beta == d && cols[2 + d + j] != b) {
                return Err(Error::Parse(format!("unexpected header `{header}`")));
            }
        }
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        let mut betas = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "row {row}: expected {} fields, got {}",
                    cols.len(),
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {row}: `{s}`: {e}")))
            };
            let t: usize = fields[0]
                .parse()
                .map_err(|e| Error::Parse(format!("row {row}: bad t `{}`: {e}", fields[0])))?;
            if t != row {
                return Err(Error::Parse(format!(
                    "row {row}: expected t = {row}, got {t}"
                )));
            }
            ys.push(num(fields[1])?);
            for f in &fields[2..2 + d] {
                xs.push(num(f)?);
            }
            for f in &fields[2 + d..] {
                betas.push(num(f)?);
            }
        }
        let n = ys.len();
        let betas = (n_beta > 0).then(|| DMatrix::from_row_slice(n, d, &betas));
        Trajectory::new(
            DMatrix::from_row_slice(n, d, &xs),
            DVector::from_vec(ys),
            betas,
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Random stream used for the trajectory `(seed, T)`.
pub fn trajectory_rng(seed: u64, horizon: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(horizon as u64);
    rng
}

/// A precomputed PSD factor `L` with `L L^T = cov`.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    factor: DMatrix<f64>,
}

impl GaussianFactor {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        crate::linalg::ensure_square(cov, "covariance")?;
        let scale = cov.amax().max(1.0);
        let asym = max_asymmetry(cov);
        if asym > 1e-12 * scale {
            return Err(Error::Validation(format!(
                "covariance is not symmetric: max |C - C^T| = {asym:e}"
            )));
        }
        let lmin = lambda_min_sym(cov);
        if lmin < -PSD_TOL * scale {
            return Err(Error::Validation(format!(
                "covariance is not positive semidefinite: lambda_min = {lmin:e}"
            )));
        }
        Ok(Self {
            factor: psd_sqrt(cov),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normals(rng, self.factor.nrows());
        &self.factor * z
    }
}

fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// One draw of `N(0, cov)` as `L z`, with `L` the eigen-decomposition square root.
pub fn gaussian_vector<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Ok(GaussianFactor::new(cov)?.sample(rng))
}

pub fn simulate_trajectory(
    params: &SystemParams,
    horizon: usize,
    seed: u64,
    keep_states: bool,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Domain("T must be positive".into()));
    }
    let d = params.dim();
    let stat = lyapunov_solve(&params.a, &params.sigma_w)?;
    let init = GaussianFactor::new(&stat.sigma_inf)?;
    let noise = GaussianFactor::new(&params.sigma_w)?;
    let mut rng = trajectory_rng(seed, horizon);

    let mut xs = DMatrix::zeros(horizon, d);
    let mut ys = DVector::zeros(horizon);
    let mut betas = keep_states.then(|| DMatrix::zeros(horizon, d));

    let mut beta = init.sample(&mut rng);
    for t in 0..horizon {
        let x = standard_normals(&mut rng, d);
        let eps: f64 = rng.sample(StandardNormal);
        let w = noise.sample(&mut rng);

        ys[t] = x.dot(&beta) + params.sigma_eps * eps;
        xs.set_row(t, &x.transpose());
        if let Some(b) = betas.as_mut() {
            b.set_row(t, &beta.transpose());
        }
        beta = &params.a * &beta + w;
    }
    Ok(Trajectory {
        xs,
        ys,
        betas,
        seed,
    })
}
