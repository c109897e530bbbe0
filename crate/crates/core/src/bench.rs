//! Monte Carlo harness: simulate on a grid of horizons, run the estimators on
//! paired trajectories, aggregate the errors and fit the log-log rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::ols_full_state;
use crate::cm::estimate_cm;
use crate::em::{default_em_init, em_fit, EmOptions};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::model::{
    lyapunov_solve, spectral_radius, theoretical_bound, validate_params, StationarySolution,
    SystemParams,
};
use crate::simulate::{simulate_trajectory, Trajectory};

pub const TRIALS_HEADER: &str =
    "estimator,T,trial,seed,traj_hash,err_A,err_sigma,err_cross,wall_time_ms,status";
pub const SUMMARY_HEADER: &str = "estimator,T,n_ok,median_err_A,q90_err_A,bound_A,coverage";
pub const RATES_HEADER: &str = "estimator,slope,intercept";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Cm,
    CmIntercept,
    Em,
    FullState,
}

impl Estimator {
    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Cm => "cm",
            Estimator::CmIntercept => "cm_intercept",
            Estimator::Em => "em",
            Estimator::FullState => "full_state",
        }
    }
}

fn default_trials() -> usize {
    32
}
fn default_delta() -> f64 {
    0.1
}
fn default_c() -> f64 {
    1.0
}
fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Cm]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("bench_out")
}
fn default_em_max_iters() -> usize {
    EmOptions::default().max_iters
}
fn default_em_tol() -> f64 {
    EmOptions::default().tol
}

/// Declarative experiment; the JSON document maps onto it field by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: SystemParams,
    pub t_grid: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_c")]
    pub c_convention: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_em_max_iters")]
    pub em_max_iters: usize,
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
    /// When false, `wall_time_ms` is written as 0 so outputs are byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

pub fn parse_config(text: &[u8]) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_slice(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(&path, e.into_inner().to_string())
    })?;
    validate_config(cfg)
}

pub fn validate_config(mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.params = validate_params(cfg.params).map_err(|e| config_err("params", e.to_string()))?;
    let rho = spectral_radius(&cfg.params.a).map_err(|e| config_err("params.A", e.to_string()))?;
    if rho >= 1.0 {
        return Err(config_err(
            "params.A",
            format!("spectral radius {rho} must be below 1"),
        ));
    }
    if cfg.t_grid.is_empty() {
        return Err(config_err("t_grid", "must not be empty"));
    }
    if cfg.t_grid[0] == 0 {
        return Err(config_err("t_grid", "entries must be positive"));
    }
    if cfg.t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("t_grid", "must be strictly ascending"));
    }
    if cfg.trials == 0 {
        return Err(config_err("trials", "must be at least 1"));
    }
    if cfg.estimators.is_empty() {
        return Err(config_err("estimators", "must not be empty"));
    }
    let mut seen = cfg.estimators.clone();
    seen.sort();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_err("estimators", "contains duplicates"));
    }
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(config_err(
            "delta",
            format!("must lie in (0, 1), got {}", cfg.delta),
        ));
    }
    if let Some(g) = cfg.gamma {
        if !(g > rho && g < 1.0) {
            return Err(config_err(
                "gamma",
                format!("must lie in (rho(A), 1) = ({rho}, 1), got {g}"),
            ));
        }
    }
    if !(cfg.c_convention > 0.0 && cfg.c_convention.is_finite()) {
        return Err(config_err("c_convention", "must be positive"));
    }
    if cfg.em_tol.is_nan() || cfg.em_tol < 0.0 {
        return Err(config_err("em_tol", "must be nonnegative"));
    }
    Ok(cfg)
}

pub fn config_to_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub estimator: Estimator,
    pub t: usize,
    pub trial: usize,
    pub seed: u64,
    pub traj_hash: String,
    pub err_a: Option<f64>,
    pub err_sigma: Option<f64>,
    pub err_cross: Option<f64>,
    pub wall_time_ms: f64,
    /// `"ok"` or an error tag.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSummary {
    pub estimator: Estimator,
    /// `None` when fewer than two horizons have a positive median.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub per_t_median: BTreeMap<usize, f64>,
    pub per_t_quantile_90: BTreeMap<usize, f64>,
    pub per_t_n_ok: BTreeMap<usize, usize>,
    pub bound_per_t: Option<BTreeMap<usize, f64>>,
    /// Fraction of successful trials with `err_A <= bound_A`.
    pub coverage_per_t: Option<BTreeMap<usize, f64>>,
    /// Horizons where every trial failed.
    pub degenerate_t: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<RateSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Serial,
    Parallel,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with(cfg, Schedule::Parallel)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, schedule: Schedule) -> Result<ExperimentOutput> {
    let cfg = validate_config(cfg.clone())?;
    let stat = lyapunov_solve(&cfg.params.a, &cfg.params.sigma_w)?;
    let jobs: Vec<(usize, usize)> = cfg
        .t_grid
        .iter()
        .flat_map(|&t| (0..cfg.trials).map(move |i| (t, i)))
        .collect();
    let run = |&(t, i): &(usize, usize)| run_trial(&cfg, &stat, t, i);
    let mut records: Vec<TrialRecord> = match schedule {
        Schedule::Serial => jobs.iter().flat_map(run).collect(),
        Schedule::Parallel => jobs.par_iter().flat_map_iter(run).collect(),
    };
    records.sort_by_key(|r| (r.estimator, r.t, r.trial));
    let summaries = summarize(&cfg, &stat, &records)?;
    Ok(ExperimentOutput { records, summaries })
}

struct Errors {
    a: f64,
    sigma: Option<f64>,
    cross: Option<f64>,
}

fn run_trial(
    cfg: &ExperimentConfig,
    stat: &StationarySolution,
    t: usize,
    trial: usize,
) -> Vec<TrialRecord> {
    let seed = cfg.base_seed.wrapping_add(trial as u64);
    let keep = cfg.estimators.contains(&Estimator::FullState);
    let traj = simulate_trajectory(&cfg.params, t, seed, keep);
    let hash = traj.as_ref().map(Trajectory::data_hash).unwrap_or_default();
    cfg.estimators
        .iter()
        .map(|&est| {
            let start = Instant::now();
            let outcome = traj
                .as_ref()
                .map_err(|e| e.tag())
                .and_then(|tr| run_estimator(cfg, stat, est, tr).map_err(|e| e.tag()));
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            let (err_a, err_sigma, err_cross, status) = match outcome {
                Ok(e) => (Some(e.a), e.sigma, e.cross, "ok".to_string()),
                Err(tag) => (None, None, None, tag.to_string()),
            };
            TrialRecord {
                estimator: est,
                t,
                trial,
                seed,
                traj_hash: hash.clone(),
                err_a,
                err_sigma,
                err_cross,
                wall_time_ms: if cfg.record_wall_time { elapsed } else { 0.0 },
                status,
            }
        })
        .collect()
}

fn run_estimator(
    cfg: &ExperimentConfig,
    stat: &StationarySolution,
    est: Estimator,
    traj: &Trajectory,
) -> Result<Errors> {
    let a_true = &cfg.params.a;
    let cross_true = a_true * &stat.sigma_inf;
    let cm_errors = |known: Option<f64>| -> Result<Errors> {
        let e = estimate_cm(traj, known)?;
        Ok(Errors {
            a: (&e.a_hat - a_true).norm(),
            sigma: Some((&e.sigma_hat - &stat.sigma_inf).norm()),
            cross: Some((&e.m_hat - &cross_true).norm()),
        })
    };
    match est {
        Estimator::Cm => cm_errors(Some(cfg.params.sigma_eps)),
        Estimator::CmIntercept => cm_errors(None),
        Estimator::Em => {
            let d = cfg.params.dim();
            let init = match estimate_cm(traj, Some(cfg.params.sigma_eps)) {
                Ok(e) => default_em_init(&e.a_hat)?,
                Err(_) => DMatrix::zeros(d, d),
            };
            let fit = em_fit(
                traj,
                &cfg.params.sigma_w,
                cfg.params.sigma_eps,
                &init,
                EmOptions {
                    max_iters: cfg.em_max_iters,
                    tol: cfg.em_tol,
                    ..Default::default()
                },
            )?;
            Ok(Errors {
                a: (&fit.a_hat - a_true).norm(),
                sigma: None,
                cross: None,
            })
        }
        Estimator::FullState => {
            let betas = traj
                .betas
                .as_ref()
                .ok_or_else(|| Error::Validation("trajectory carries no states".into()))?;
            let a_hat = ols_full_state(betas)?;
            Ok(Errors {
                a: (a_hat - a_true).norm(),
                sigma: None,
                cross: None,
            })
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(
    cfg: &ExperimentConfig,
    stat: &StationarySolution,
    records: &[TrialRecord],
) -> Result<Vec<RateSummary>> {
    let bounds: Option<BTreeMap<usize, f64>> = match cfg.gamma {
        Some(g) => Some(
            cfg.t_grid
                .iter()
                .map(|&t| {
                    theoretical_bound(&cfg.params, stat, t, cfg.delta, g, cfg.c_convention)
                        .map(|b| (t, b.bound_a))
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let mut estimators = cfg.estimators.clone();
    estimators.sort();
    let mut out = Vec::new();
    for est in estimators {
        let mut median = BTreeMap::new();
        let mut q90 = BTreeMap::new();
        let mut n_ok = BTreeMap::new();
        let mut coverage = BTreeMap::new();
        let mut degenerate = Vec::new();
        for &t in &cfg.t_grid {
            let mut errs: Vec<f64> = records
                .iter()
                .filter(|r| r.estimator == est && r.t == t)
                .filter_map(|r| r.err_a)
                .collect();
            n_ok.insert(t, errs.len());
            if errs.is_empty() {
                degenerate.push(t);
                continue;
            }
            errs.sort_by(f64::total_cmp);
            median.insert(t, quantile_sorted(&errs, 0.5));
            q90.insert(t, quantile_sorted(&errs, 0.9));
            if let Some(b) = bounds.as_ref().and_then(|m| m.get(&t)) {
                let covered = errs.iter().filter(|&&e| e <= *b).count();
                coverage.insert(t, covered as f64 / errs.len() as f64);
            }
        }
        let positive: BTreeMap<usize, f64> = median
            .iter()
            .filter(|(_, &m)| m > 0.0)
            .map(|(&t, &m)| (t, m))
            .collect();
        let fit = fit_rate_slope(&positive).ok();
        out.push(RateSummary {
            estimator: est,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            per_t_median: median,
            per_t_quantile_90: q90,
            per_t_n_ok: n_ok,
            bound_per_t: bounds.clone(),
            coverage_per_t: bounds.as_ref().map(|_| coverage),
            degenerate_t: degenerate,
        });
    }
    Ok(out)
}

/// Least-squares fit of `log2(median)` on `log2(T)`; returns `(slope, intercept)`.
pub fn fit_rate_slope(per_t_median: &BTreeMap<usize, f64>) -> Result<(f64, f64)> {
    if per_t_median.len() < 2 {
        return Err(Error::Domain(format!(
            "rate fit needs at least 2 horizons, got {}",
            per_t_median.len()
        )));
    }
    if let Some((t, m)) = per_t_median.iter().find(|(&t, &m)| t == 0 || m.is_nan() || m <= 0.0) {
        return Err(Error::Domain(format!(
            "rate fit needs positive T and medians, got T = {t}, median = {m}"
        )));
    }
    let pts: Vec<(f64, f64)> = per_t_median
        .iter()
        .map(|(&t, &m)| ((t as f64).log2(), m.log2()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn trials_csv(records: &[TrialRecord]) -> String {
    let mut out = format!("{TRIALS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.estimator.tag(),
            r.t,
            r.trial,
            r.seed,
            r.traj_hash,
            opt(r.err_a),
            opt(r.err_sigma),
            opt(r.err_cross),
            fmt_f64(r.wall_time_ms),
            r.status
        );
    }
    out
}

pub fn summary_csv(summaries: &[RateSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summaries {
        for (&t, &n_ok) in &s.per_t_n_ok {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.estimator.tag(),
                t,
                n_ok,
                opt(s.per_t_median.get(&t).copied()),
                opt(s.per_t_quantile_90.get(&t).copied()),
                opt(s.bound_per_t.as_ref().and_then(|b| b.get(&t).copied())),
                opt(s.coverage_per_t.as_ref().and_then(|c| c.get(&t).copied())),
            );
        }
    }
    out
}

pub fn rates_csv(summaries: &[RateSummary]) -> String {
    let mut out = format!("{RATES_HEADER}\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{}",
            s.estimator.tag(),
            opt(s.slope),
            opt(s.intercept)
        );
    }
    out
}

/// Writes `trials.csv`, `summary.csv`, `rates.csv` and `config.echo.json`
/// into `cfg.output_dir`, each through a temp file and rename.
pub fn write_outputs(
    records: &[TrialRecord],
    summaries: &[RateSummary],
    cfg: &ExperimentConfig,
) -> Result<()> {
    let dir: &Path = &cfg.output_dir;
    write_atomic(&dir.join("trials.csv"), trials_csv(records).as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(summaries).as_bytes())?;
    write_atomic(&dir.join("rates.csv"), rates_csv(summaries).as_bytes())?;
    write_atomic(
        &dir.join("config.echo.json"),
        config_to_json(cfg).as_bytes(),
    )
}

/// Reads the per-horizon medians of one estimator back out of `summary.csv` text.
pub fn medians_from_summary(text: &str, estimator: Estimator) -> Result<BTreeMap<usize, f64>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Parse("summary.csv header mismatch".into()));
    }
    let mut out = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("bad summary row `{line}`")));
        }
        if f[0] != estimator.tag() || f[3].is_empty() {
            continue;
        }
        let t = f[1]
            .parse()
            .map_err(|_| Error::Parse(format!("bad T `{}`", f[1])))?;
        let m = f[3]
            .parse()
            .map_err(|_| Error::Parse(format!("bad median `{}`", f[3])))?;
        out.insert(t, m);
    }
    Ok(out)
}
