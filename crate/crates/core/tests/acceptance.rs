//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tvlds_core::bench::{run_experiment_with, summary_csv, trials_csv, Schedule};
use tvlds_core::cm::{build_sym_design, svec, svec_inv};
use tvlds_core::em::{em_fit, kalman_filter, rts_smoother, EmOptions};
use tvlds_core::{
    estimate_cm, lyapunov_solve, ols_full_state, parse_config, simulate_trajectory, write_outputs,
    Estimator, SystemParams, Trajectory,
};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn reference_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json")
}

fn rate_reproduction() -> Outcome {
    let text = std::fs::read(reference_config_path()).map_err(|e| e.to_string())?;
    let cfg = parse_config(&text).map_err(|e| e.to_string())?;
    let out = run_experiment_with(&cfg, Schedule::Parallel).map_err(|e| e.to_string())?;
    let cm = out
        .summaries
        .iter()
        .find(|s| s.estimator == Estimator::Cm)
        .ok_or("no cm summary")?;
    let slope = cm.slope.ok_or("slope undefined")?;
    check(
        (-0.70..=-0.30).contains(&slope),
        format!("cm slope {slope:.4} (want [-0.70, -0.30])"),
    )
}

fn lyapunov_correctness() -> Outcome {
    let mut rng = rng(2);
    let (mut worst_resid, mut worst_series) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let d = 1 + i % 8;
        let a = random_stable(&mut rng, d, 0.9);
        let w = random_spd(&mut rng, d);
        let p = lyapunov_solve(&a, &w).map_err(|e| e.to_string())?.sigma_inf;
        let resid = (&a * &p * a.transpose() + &w - &p).norm() / p.norm().max(1.0);
        worst_resid = worst_resid.max(resid);
        worst_series = worst_series.max(max_diff(&p, &lyapunov_series(&a, &w)));
    }
    check(
        worst_resid <= 1e-10 && worst_series <= 1e-9,
        format!("max scaled residual {worst_resid:.2e}, max series gap {worst_series:.2e}"),
    )
}

fn svec_isometry() -> Outcome {
    let mut rng = rng(3);
    let (mut worst_iso, mut worst_trip) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let m = random_symmetric(&mut rng, 1 + i % 7);
        let v = svec(&m).map_err(|e| e.to_string())?;
        worst_iso = worst_iso.max((v.data.norm_squared() - m.norm_squared()).abs());
        let back = svec_inv(&v).map_err(|e| e.to_string())?;
        worst_trip = worst_trip.max(max_diff(&back, &m));
    }
    check(
        worst_iso <= 1e-12 && worst_trip <= 1e-15,
        format!("isometry gap {worst_iso:.2e}, round-trip gap {worst_trip:.2e}"),
    )
}

fn filter_smoother_exactness() -> Outcome {
    let mut rng = rng(4);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let d = 1 + i % 3;
        let n = 2 + i % 5;
        let a = random_stable(&mut rng, d, 0.95);
        let w = random_spd(&mut rng, d);
        let sigma_eps = rng.random_range(0.2..1.0);
        let traj = small_trajectory(&mut rng, &a, &w, sigma_eps, n);
        let m0 = gaussian_matrix(&mut rng, d, 1).column(0).clone_owned();
        let p0 = random_spd(&mut rng, d);
        let f = kalman_filter(&traj, &a, &w, sigma_eps, &m0, &p0).map_err(|e| e.to_string())?;
        let s = rts_smoother(&f, &a).map_err(|e| e.to_string())?;
        let o = dense_gaussian(&traj, &a, &w, sigma_eps, &m0, &p0);
        for t in 0..n {
            worst = worst
                .max((&f.pred_means[t] - &o.pred_means[t]).amax())
                .max(max_diff(&f.pred_covs[t], &o.pred_covs[t]))
                .max((&f.filt_means[t] - &o.filt_means[t]).amax())
                .max(max_diff(&f.filt_covs[t], &o.filt_covs[t]))
                .max((&s.smooth_means[t] - &o.smooth_means[t]).amax())
                .max(max_diff(&s.smooth_covs[t], &o.smooth_covs[t]));
        }
        for t in 0..n - 1 {
            worst = worst.max(max_diff(&s.lag_one_covs[t], &o.lag_one[t]));
        }
        worst = worst.max((f.loglik - o.loglik).abs());
    }
    check(
        worst <= 1e-8,
        format!("max deviation {worst:.2e} over 20 instances"),
    )
}

fn em_ascent() -> Outcome {
    let mut rng = rng(5);
    let mut worst = f64::INFINITY;
    let opts = EmOptions {
        max_iters: 200,
        tol: 0.0,
        ..Default::default()
    };
    for i in 0..10 {
        let d = 1 + i % 2;
        let a = random_stable(&mut rng, d, 0.9);
        let w = random_spd(&mut rng, d);
        let sigma_eps = rng.random_range(0.3..1.0);
        let params = SystemParams::new(a, w.clone(), sigma_eps).map_err(|e| e.to_string())?;
        let traj =
            simulate_trajectory(&params, 300, 100 + i as u64, false).map_err(|e| e.to_string())?;
        let init = random_stable(&mut rng, d, 0.9);
        let est = em_fit(&traj, &w, sigma_eps, &init, opts).map_err(|e| e.to_string())?;
        for pair in est.loglik_trace.windows(2) {
            worst = worst.min(pair[1] - pair[0]);
        }
    }
    check(
        worst >= -1e-8,
        format!("smallest loglik increment {worst:.2e}"),
    )
}

fn transform(traj: &Trajectory, q: &DMatrix<f64>) -> Trajectory {
    Trajectory::new(&traj.xs * q.transpose(), traj.ys.clone(), None).unwrap()
}

fn cm_equivariance() -> Outcome {
    let mut rng = rng(6);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let d = 2 + i % 2;
        let a = random_stable(&mut rng, d, 0.8);
        let w = random_spd(&mut rng, d);
        let params = SystemParams::new(a, w, 0.5).map_err(|e| e.to_string())?;
        let traj =
            simulate_trajectory(&params, 4000, 200 + i as u64, false).map_err(|e| e.to_string())?;
        let q = random_orthogonal(&mut rng, d);
        let base = estimate_cm(&traj, Some(0.5)).map_err(|e| e.to_string())?;
        let rot = estimate_cm(&transform(&traj, &q), Some(0.5)).map_err(|e| e.to_string())?;
        let conj = |m: &DMatrix<f64>| &q * m * q.transpose();
        worst = worst
            .max(max_diff(&rot.sigma_hat, &conj(&base.sigma_hat)))
            .max(max_diff(&rot.m_hat, &conj(&base.m_hat)))
            .max(max_diff(&rot.a_hat, &conj(&base.a_hat)));
    }
    check(
        worst <= 1e-8,
        format!("max conjugation mismatch {worst:.2e}"),
    )
}

fn design_spectrum() -> Outcome {
    let params = SystemParams::new(
        DMatrix::identity(2, 2) * 0.5,
        DMatrix::identity(2, 2) * 0.75,
        0.5,
    )
    .map_err(|e| e.to_string())?;
    let n = 20_000;
    // coordinates (x0^2, sqrt2 x0 x1, x1^2)
    let target = DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 3.0]);
    let mut pooled = DMatrix::zeros(3, 3);
    let mut good = 0;
    for seed in 0..40 {
        let traj = simulate_trajectory(&params, n, seed, false).map_err(|e| e.to_string())?;
        let (phi, _) = build_sym_design(&traj, Some(0.5));
        let gram = phi.tr_mul(&phi) / n as f64;
        let lmin = gram.clone().symmetric_eigenvalues().min();
        if lmin >= 1.5 {
            good += 1;
        }
        pooled += gram / 40.0;
    }
    let fro = (&pooled - &target).norm();
    check(
        fro <= 0.1 && good >= 38,
        format!("pooled Gram/T gap {fro:.4}, lambda_min/T >= 1.5 in {good}/40 seeds"),
    )
}

fn scalar_closed_form() -> Outcome {
    let mut rng = rng(8);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let a = rng.random_range(-0.9..0.9);
        let w = rng.random_range(0.2..1.5);
        let sigma_eps = rng.random_range(0.1..1.0);
        let n = rng.random_range(50..2000);
        let params = SystemParams::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, w),
            sigma_eps,
        )
        .map_err(|e| e.to_string())?;
        let traj = simulate_trajectory(&params, n, seed, false).map_err(|e| e.to_string())?;
        let est = estimate_cm(&traj, Some(sigma_eps)).map_err(|e| e.to_string())?;
        let (x, y) = (&traj.xs, &traj.ys);
        let s2 = sigma_eps * sigma_eps;
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..n {
            num += x[(t, 0)].powi(2) * (y[t] * y[t] - s2);
            den += x[(t, 0)].powi(4);
        }
        let sigma = num / den;
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..n - 1 {
            let psi = x[(t, 0)] * x[(t + 1, 0)];
            num += psi * y[t] * y[t + 1];
            den += psi * psi;
        }
        let m = num / den;
        worst = worst
            .max((est.sigma_hat[(0, 0)] - sigma).abs())
            .max((est.m_hat[(0, 0)] - m).abs())
            .max((est.a_hat[(0, 0)] - m / sigma).abs());
    }
    check(
        worst <= 1e-10,
        format!("max deviation {worst:.2e} over 20 seeds"),
    )
}

fn full_state_baseline() -> Outcome {
    let params = SystemParams::new(
        DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]),
        DMatrix::identity(2, 2) * 0.5,
        0.5,
    )
    .map_err(|e| e.to_string())?;
    let traj = simulate_trajectory(&params, 500, 9, true).map_err(|e| e.to_string())?;
    let betas = traj.betas.as_ref().ok_or("no states")?;
    let est = ols_full_state(betas).map_err(|e| e.to_string())?;
    let head = betas.rows(0, 499).clone_owned();
    let mut oracle = DMatrix::zeros(2, 2);
    for i in 0..2 {
        let target: DVector<f64> = betas.rows(1, 499).column(i).clone_owned();
        let row = normal_equations(&head, &target);
        oracle.set_row(i, &row.transpose());
    }
    let gap = max_diff(&est, &oracle);
    let geo = ols_full_state(&DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 0.25]))
        .map_err(|e| e.to_string())?[(0, 0)];
    check(
        gap <= 1e-9 && geo == 0.5,
        format!("normal-equations gap {gap:.2e}, geometric case {geo}"),
    )
}

fn harness_determinism() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.json");
    let text = std::fs::read(path).map_err(|e| e.to_string())?;
    let mut cfg = parse_config(&text).map_err(|e| e.to_string())?;
    let serial = run_experiment_with(&cfg, Schedule::Serial).map_err(|e| e.to_string())?;
    let parallel = run_experiment_with(&cfg, Schedule::Parallel).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for (name, out) in [("serial", &serial), ("parallel", &parallel)] {
        cfg.output_dir = dir.path().join(name);
        write_outputs(&out.records, &out.summaries, &cfg).map_err(|e| e.to_string())?;
        let read = |f: &str| std::fs::read(cfg.output_dir.join(f)).unwrap();
        bytes.push((read("trials.csv"), read("summary.csv")));
    }
    let same = bytes[0] == bytes[1]
        && trials_csv(&serial.records) == trials_csv(&parallel.records)
        && summary_csv(&serial.summaries) == summary_csv(&parallel.summaries);
    check(
        same,
        format!(
            "{} records, trials.csv and summary.csv {}",
            serial.records.len(),
            if same { "identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("rate reproduction", rate_reproduction),
        ("lyapunov correctness", lyapunov_correctness),
        ("svec isometry and round-trip", svec_isometry),
        ("filter/smoother exactness", filter_smoother_exactness),
        ("em ascent", em_ascent),
        ("cm orthogonal equivariance", cm_equivariance),
        ("design-matrix spectrum", design_spectrum),
        ("scalar closed form", scalar_closed_form),
        ("full-state baseline", full_state_baseline),
        ("harness determinism", harness_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
