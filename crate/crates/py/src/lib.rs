//! Python bindings. Matrices cross the boundary as lists of rows; structured
//! results come back as plain dicts.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use tvlds_core::bench::{self, Schedule};
use tvlds_core::cm::{estimate_cm_with, CmOptions};
use tvlds_core::em::{default_em_init, em_fit as core_em_fit, EmOptions, PriorMode};
use tvlds_core::linalg::{from_rows, to_rows};
use tvlds_core::{model, Error, SvecVector};

create_exception!(tvlds, NumericalError, PyArithmeticError);

fn py_err(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.tag());
    match e.exit_code() {
        2 => PyValueError::new_err(msg),
        4 => PyOSError::new_err(msg),
        _ => NumericalError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for tvlds_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<DMatrix<f64>> {
    from_rows(&rows, what).py()
}

fn to_py_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Params", module = "tvlds", frozen)]
struct Params {
    inner: model::SystemParams,
}

#[pymethods]
impl Params {
    #[new]
    fn new(a: Vec<Vec<f64>>, sigma_w: Vec<Vec<f64>>, sigma_eps: f64) -> PyResult<Self> {
        let inner =
            model::SystemParams::new(matrix(a, "A")?, matrix(sigma_w, "sigma_w")?, sigma_eps)
                .py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.a)
    }

    #[getter]
    fn sigma_w(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.sigma_w)
    }

    #[getter]
    fn sigma_eps(&self) -> f64 {
        self.inner.sigma_eps
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn stationary_covariance(&self) -> PyResult<Vec<Vec<f64>>> {
        let stat = model::lyapunov_solve(&self.inner.a, &self.inner.sigma_w).py()?;
        Ok(to_rows(&stat.sigma_inf))
    }

    fn __repr__(&self) -> String {
        format!(
            "Params(dim={}, sigma_eps={})",
            self.inner.dim(),
            self.inner.sigma_eps
        )
    }
}

#[pyclass(name = "Trajectory", module = "tvlds", frozen)]
struct Trajectory {
    inner: tvlds_core::Trajectory,
}

#[pymethods]
impl Trajectory {
    #[new]
    #[pyo3(signature = (xs, ys, betas=None))]
    fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>, betas: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let betas = betas.map(|b| matrix(b, "betas")).transpose()?;
        let inner =
            tvlds_core::Trajectory::new(matrix(xs, "xs")?, DVector::from_vec(ys), betas).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: tvlds_core::Trajectory::from_csv(text).py()?,
        })
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    #[getter]
    fn xs(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.xs)
    }

    #[getter]
    fn ys(&self) -> Vec<f64> {
        self.inner.ys.iter().copied().collect()
    }

    #[getter]
    fn betas(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.betas.as_ref().map(to_rows)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn data_hash(&self) -> String {
        self.inner.data_hash()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
#[pyo3(signature = (params, horizon, seed, keep_states=false))]
fn simulate(params: &Params, horizon: usize, seed: u64, keep_states: bool) -> PyResult<Trajectory> {
    Ok(Trajectory {
        inner: tvlds_core::simulate_trajectory(&params.inner, horizon, seed, keep_states).py()?,
    })
}

#[pyfunction]
fn lyapunov_solve(a: Vec<Vec<f64>>, sigma_w: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let stat = model::lyapunov_solve(&matrix(a, "A")?, &matrix(sigma_w, "sigma_w")?).py()?;
    Ok(to_rows(&stat.sigma_inf))
}

#[pyfunction]
fn spectral_radius(a: Vec<Vec<f64>>) -> PyResult<f64> {
    model::spectral_radius(&matrix(a, "A")?).py()
}

#[pyfunction]
fn gelfand_tau(a: Vec<Vec<f64>>, gamma: f64) -> PyResult<f64> {
    model::gelfand_tau(&matrix(a, "A")?, gamma).py()
}

#[pyfunction]
#[pyo3(signature = (params, horizon, delta, gamma, c=1.0))]
fn theoretical_bound<'py>(
    py: Python<'py>,
    params: &Params,
    horizon: usize,
    delta: f64,
    gamma: f64,
    c: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let stat = model::lyapunov_solve(&params.inner.a, &params.inner.sigma_w).py()?;
    let bound = model::theoretical_bound(&params.inner, &stat, horizon, delta, gamma, c).py()?;
    to_py_object(py, &bound)
}

#[pyfunction]
fn svec(m: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(tvlds_core::svec(&matrix(m, "matrix")?)
        .py()?
        .data
        .iter()
        .copied()
        .collect())
}

#[pyfunction]
fn svec_inv(v: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let v = SvecVector::from_vec(v).py()?;
    Ok(to_rows(&tvlds_core::svec_inv(&v).py()?))
}

#[pyfunction]
#[pyo3(signature = (traj, sigma_eps=None, clip_eigenvalues=false))]
fn estimate_cm<'py>(
    py: Python<'py>,
    traj: &Trajectory,
    sigma_eps: Option<f64>,
    clip_eigenvalues: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = CmOptions {
        sigma_eps,
        clip_eigenvalues,
    };
    let est = py.detach(|| estimate_cm_with(&traj.inner, &opts)).py()?;
    to_py_object(py, &est)
}

#[pyfunction]
#[pyo3(signature = (traj, sigma_w, sigma_eps, a_init=None, max_iters=500, tol=1e-6, per_iterate_prior=false))]
#[allow(clippy::too_many_arguments)]
fn em_fit<'py>(
    py: Python<'py>,
    traj: &Trajectory,
    sigma_w: Vec<Vec<f64>>,
    sigma_eps: f64,
    a_init: Option<Vec<Vec<f64>>>,
    max_iters: usize,
    tol: f64,
    per_iterate_prior: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let sigma_w = matrix(sigma_w, "sigma_w")?;
    let init = match a_init {
        Some(a) => matrix(a, "a_init")?,
        None => {
            let cm = estimate_cm_with(
                &traj.inner,
                &CmOptions {
                    sigma_eps: Some(sigma_eps),
                    clip_eigenvalues: false,
                },
            )
            .py()?;
            default_em_init(&cm.a_hat).py()?
        }
    };
    let opts = EmOptions {
        max_iters,
        tol,
        prior: if per_iterate_prior {
            PriorMode::PerIterate
        } else {
            PriorMode::FixedAtInit
        },
    };
    let est = py
        .detach(|| core_em_fit(&traj.inner, &sigma_w, sigma_eps, &init, opts))
        .py()?;
    to_py_object(py, &est)
}

#[pyfunction]
fn ols_full_state(betas: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(
        &tvlds_core::ols_full_state(&matrix(betas, "betas")?).py()?,
    ))
}

#[pyfunction]
fn fit_rate_slope(per_t_median: BTreeMap<usize, f64>) -> PyResult<(f64, f64)> {
    tvlds_core::fit_rate_slope(&per_t_median).py()
}

/// Runs an experiment from its JSON config text and returns the CSV outputs
/// as strings keyed by file name.
#[pyfunction]
#[pyo3(signature = (config_json, parallel=true))]
fn run_experiment(config_json: &str, parallel: bool) -> PyResult<BTreeMap<String, String>> {
    let cfg = bench::parse_config(config_json.as_bytes()).py()?;
    let schedule = if parallel {
        Schedule::Parallel
    } else {
        Schedule::Serial
    };
    let out = bench::run_experiment_with(&cfg, schedule).py()?;
    Ok(BTreeMap::from([
        ("trials.csv".to_string(), bench::trials_csv(&out.records)),
        (
            "summary.csv".to_string(),
            bench::summary_csv(&out.summaries),
        ),
        ("rates.csv".to_string(), bench::rates_csv(&out.summaries)),
    ]))
}

#[pymodule]
pub fn tvlds(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<Params>()?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(lyapunov_solve, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(gelfand_tau, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_bound, m)?)?;
    m.add_function(wrap_pyfunction!(svec, m)?)?;
    m.add_function(wrap_pyfunction!(svec_inv, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cm, m)?)?;
    m.add_function(wrap_pyfunction!(em_fit, m)?)?;
    m.add_function(wrap_pyfunction!(ols_full_state, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate_slope, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
