use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::Value;

use tvlds_core::cm::{estimate_cm_with, CmOptions};
use tvlds_core::em::{default_em_init, em_fit, EmOptions};
use tvlds_core::io::{matrix_csv, read_file, write_atomic};
use tvlds_core::linalg::{from_rows, serde_rows};
use tvlds_core::{
    lyapunov_solve, ols_full_state, parse_config, run_experiment, simulate_trajectory,
    theoretical_bound, validate_params, write_outputs, Error, Result, SystemParams, Trajectory,
};

#[derive(Parser)]
#[command(
    name = "tvlds",
    version,
    about = "Latent dynamics of time-varying regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory and write it as CSV.
    Simulate {
        /// Parameter document, or an experiment config whose `params` is used.
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        keep_states: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate A from a trajectory CSV and write the estimate as JSON.
    Estimate {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sigma_eps: Option<f64>,
        /// JSON matrix (list of rows) used as the EM starting point.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Parameters supplying sigma_w (and sigma_eps if not given) for EM.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Floor the eigenvalues of the covariance estimate before solving for A.
        #[arg(long)]
        clip: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write each estimated matrix as a CSV file into this directory.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Run a Monte Carlo rate experiment and write its CSV outputs.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the finite-sample bounds as JSON.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Cm,
    CmIntercept,
    Em,
    FullState,
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn load_params(path: &Path) -> Result<SystemParams> {
    let mut doc = read_json(path)?;
    if let Some(inner) = doc.get_mut("params") {
        doc = inner.take();
    }
    let params: SystemParams = serde_json::from_value(doc).map_err(|e| Error::Config {
        path: "params".into(),
        msg: e.to_string(),
    })?;
    validate_params(params)
}

fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_value(read_json(path)?).map_err(|e| Error::Parse(e.to_string()))?;
    from_rows(&rows, "init")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_matrices(dir: &Path, mats: &[(&str, &DMatrix<f64>)]) -> Result<()> {
    for (name, m) in mats {
        write_atomic(&dir.join(format!("{name}.csv")), matrix_csv(m).as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FullStateOutput {
    #[serde(with = "serde_rows")]
    a_hat: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    method: Method,
    traj: &Trajectory,
    sigma_eps: Option<f64>,
    init: Option<&Path>,
    config: Option<&Path>,
    opts: EmOptions,
    clip: bool,
    out: &Path,
    csv_dir: Option<&Path>,
) -> Result<()> {
    match method {
        Method::Cm | Method::CmIntercept => {
            let sigma_eps = match method {
                Method::Cm => Some(
                    sigma_eps
                        .ok_or_else(|| Error::Validation("--method cm needs --sigma-eps".into()))?,
                ),
                _ => None,
            };
            let est = estimate_cm_with(
                traj,
                &CmOptions {
                    sigma_eps,
                    clip_eigenvalues: clip,
                },
            )?;
            write_json(out, &est)?;
            if let Some(dir) = csv_dir {
                write_matrices(
                    dir,
                    &[
                        ("sigma_hat", &est.sigma_hat),
                        ("m_hat", &est.m_hat),
                        ("a_hat", &est.a_hat),
                    ],
                )?;
            }
        }
        Method::Em => {
            let config = config.ok_or_else(|| {
                Error::Validation("--method em needs --config for sigma_w".into())
            })?;
            let params = load_params(config)?;
            let sigma_eps = sigma_eps.unwrap_or(params.sigma_eps);
            let a_init = match init {
                Some(p) => load_matrix(p)?,
                None => {
                    let cm = estimate_cm_with(
                        traj,
                        &CmOptions {
                            sigma_eps: Some(sigma_eps),
                            clip_eigenvalues: clip,
                        },
                    )?;
                    default_em_init(&cm.a_hat)?
                }
            };
            let est = em_fit(traj, &params.sigma_w, sigma_eps, &a_init, opts)?;
            write_json(out, &est)?;
            if let Some(dir) = csv_dir {
                write_matrices(dir, &[("a_hat", &est.a_hat)])?;
            }
        }
        Method::FullState => {
            let betas = traj.betas.as_ref().ok_or_else(|| {
                Error::Validation("--method full-state needs beta columns in the data".into())
            })?;
            let a_hat = ols_full_state(betas)?;
            if let Some(dir) = csv_dir {
                write_matrices(dir, &[("a_hat", &a_hat)])?;
            }
            write_json(out, &FullStateOutput { a_hat })?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            horizon,
            seed,
            keep_states,
            out,
        } => {
            let params = load_params(&config)?;
            simulate_trajectory(&params, horizon, seed, keep_states)?.write_csv(&out)
        }
        Command::Estimate {
            method,
            data,
            sigma_eps,
            init,
            config,
            max_iters,
            tol,
            clip,
            out,
            csv_dir,
        } => {
            let traj = Trajectory::read_csv(&data)?;
            let opts = EmOptions {
                max_iters,
                tol,
                ..Default::default()
            };
            estimate(
                method,
                &traj,
                sigma_eps,
                init.as_deref(),
                config.as_deref(),
                opts,
                clip,
                &out,
                csv_dir.as_deref(),
            )
        }
        Command::Bench { config, out_dir } => {
            let mut cfg = parse_config(&read_file(&config)?)?;
            if let Some(dir) = out_dir {
                cfg.output_dir = dir;
            }
            let out = run_experiment(&cfg)?;
            write_outputs(&out.records, &out.summaries, &cfg)?;
            for s in &out.summaries {
                match s.slope {
                    Some(slope) => println!("{}: slope {slope:.4}", s.estimator.tag()),
                    None => println!("{}: slope undefined", s.estimator.tag()),
                }
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Bound {
            config,
            horizon,
            delta,
            gamma,
            c,
        } => {
            let params = load_params(&config)?;
            let stat = lyapunov_solve(&params.a, &params.sigma_w)?;
            let bound = theoretical_bound(&params, &stat, horizon, delta, gamma, c)?;
            let text =
                serde_json::to_string_pretty(&bound).map_err(|e| Error::Parse(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.tag());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
