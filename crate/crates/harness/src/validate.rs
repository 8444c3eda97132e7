//! The `validate` invariant suite: fast self-checks of the numerical core
//! run against small built-in problems, one pass/fail line per invariant.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use clv_core::ginelli::{
    backward_sweep, forward_sweep, random_upper_triangular, standard_basis_block, GinelliSchedule,
};
use clv_core::linalg::{lower_triangle_max, orthonormality_error};
use clv_core::metrics::{principal_angles, random_orthonormal_subspace};
use clv_core::models::{integrate_trajectory, ModelSpec, Trajectory};
use clv_core::tangent::propagate_along;

use crate::config::ExperimentConfig;
use crate::experiment::run_experiment;

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

fn small_l63() -> (Trajectory, GinelliSchedule) {
    let model = ModelSpec::standard_lorenz63();
    let x0 = DVector::from_column_slice(&[1.0, 1.0, 1.0]);
    let traj = integrate_trajectory(&model, &x0, 50.0, 15.0, 0.002, 0.01).unwrap();
    let schedule = GinelliSchedule::from_times(1, 0.01, 5.0, 5.0, 5.0).unwrap();
    (traj, schedule)
}

fn jacobian_fd_check() -> CheckOutcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for model in [
        ModelSpec::standard_lorenz63(),
        ModelSpec::lorenz96(12, 8.0).unwrap(),
    ] {
        let d = model.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let x0 = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let traj = integrate_trajectory(&model, &x0, 20.0, 50.0, 0.01, 0.5).unwrap();
        for s in 0..100 {
            let x = traj.state(s);
            let j = model.jacobian(x).unwrap();
            for k in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (model.vector_field(&xp).unwrap() - model.vector_field(&xm).unwrap())
                    / (2.0 * h);
                let col = j.column(k).clone_owned();
                let rel = (&fd - &col).norm() / col.norm().max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    check(
        "jacobian_finite_difference",
        worst < 1e-6,
        format!("max relative deviation {worst:.3e} (tolerance 1e-6)"),
    )
}

fn sweep_checks() -> Vec<CheckOutcome> {
    let (traj, schedule) = small_l63();
    let b0 = standard_basis_block(3, 3);
    let (history, _) = forward_sweep(&traj, &b0, &schedule).unwrap();

    let mut worst_orth = 0.0f64;
    for b in &history.blvs {
        worst_orth = worst_orth.max(orthonormality_error(b));
    }

    let mut worst_recon = 0.0f64;
    for i in 0..history.blvs.len() - 1 {
        let start = history.window_save_index(i);
        let propagated =
            propagate_along(&traj, start, schedule.qr_interval, &history.blvs[i]).unwrap();
        let reconstructed = &history.blvs[i + 1] * &history.growth_factors[i];
        let rel = (&propagated - &reconstructed).amax() / propagated.amax();
        worst_recon = worst_recon.max(rel);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(55);
    let seed = random_upper_triangular(3, &mut rng);
    let coefficients = backward_sweep(&history, &seed).unwrap();
    let mut worst_lower = 0.0f64;
    for u in &coefficients {
        worst_lower = worst_lower.max(lower_triangle_max(u));
    }

    vec![
        check(
            "blv_orthonormality",
            worst_orth < 1e-10,
            format!("max ||B'B - I|| = {worst_orth:.3e} (tolerance 1e-10)"),
        ),
        check(
            "qr_reconstruction",
            worst_recon < 1e-8,
            format!("max relative residual {worst_recon:.3e} (tolerance 1e-8)"),
        ),
        check(
            "coefficient_triangularity",
            worst_lower == 0.0,
            format!("max strictly-lower entry {worst_lower:e} (must be exactly 0)"),
        ),
    ]
}

fn pa_invariance_check() -> CheckOutcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let p = random_orthonormal_subspace(8, 3, 900 + seed).unwrap();
        let q = random_orthonormal_subspace(8, 3, 950 + seed).unwrap();
        let rot = random_orthonormal_subspace(3, 3, 990 + seed).unwrap();
        let a = principal_angles(&p, &q).unwrap();
        let b = principal_angles(&(&p * rot), &q).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    check(
        "pa_basis_invariance",
        worst < 1e-8,
        format!("max angle shift under basis rotation {worst:.3e} deg (tolerance 1e-8)"),
    )
}

const DETERMINISM_CONFIG: &str = r#"
[experiment]
id = "validate-determinism"
master_seed = 9001

[model]
kind = "lorenz63"
sigma = 10.0
rho = 28.0
beta = 2.6666666666666665

[trajectory]
solver_step = 0.002
save_interval = 0.01
spinup = 5.0
forward_transient = 2.0
sampling_window = 2.0
backward_transient = 2.0

[ginelli]
qr_interval = 1

[source]
kind = "perturbed"
sigma_grid = [0.2]

[metrics]
k_grid = [2]
random_realizations = 5
"#;

fn determinism_check() -> CheckOutcome {
    let run_once = |dir: &std::path::Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let config = ExperimentConfig::from_toml_str(DETERMINISM_CONFIG)
            .map_err(|e| format!("internal config broken: {e}"))?;
        run_experiment(&config, Some(dir)).map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
            .map_err(|e| e.to_string())?
            .filter_map(|entry| entry.ok())
            .map(|entry| {
                let name = entry.file_name().to_string_lossy().to_string();
                let bytes = std::fs::read(entry.path()).unwrap_or_default();
                (name, bytes)
            })
            .collect();
        files.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(files)
    };

    let tmp_a = tempfile::tempdir().expect("temp dir");
    let tmp_b = tempfile::tempdir().expect("temp dir");
    match (run_once(tmp_a.path()), run_once(tmp_b.path())) {
        (Ok(a), Ok(b)) => {
            let identical = a == b;
            let n = a.len();
            check(
                "determinism_byte_exact",
                identical && n > 0,
                if identical {
                    format!("{n} output files byte-identical across repeated runs")
                } else {
                    "outputs differ between identically seeded runs".to_string()
                },
            )
        }
        (Err(e), _) | (_, Err(e)) => check("determinism_byte_exact", false, e),
    }
}

fn zero_spread_gain_check() -> CheckOutcome {
    use clv_core::enkf::{analysis_update, EnkfConfig, ObservationModel};
    let state = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
    let mut ensemble = vec![state.clone(), state.clone()];
    let obs_model = ObservationModel::select(&[0], 3, 0.4, 0.01).unwrap();
    let config = EnkfConfig {
        ensemble_size: 2,
        initial_mean_offset: DVector::zeros(3),
        initial_cov_scale: 1.0,
        localization_radius: None,
        inflation: 1.0,
        seed: 0,
        burn_in: 0,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let y = DVector::from_element(1, 99.0);
    analysis_update(&mut ensemble, &y, &obs_model, &config, &mut rng).unwrap();
    let unchanged = ensemble.iter().all(|m| m == &state);
    check(
        "zero_spread_zero_gain",
        unchanged,
        if unchanged {
            "degenerate ensemble is a fixed point of the analysis".into()
        } else {
            "zero-spread ensemble moved under the analysis".into()
        },
    )
}

/// Runs every invariant check; callers print one line per entry.
pub fn run_invariant_suite() -> Vec<CheckOutcome> {
    let mut outcomes = vec![jacobian_fd_check()];
    outcomes.extend(sweep_checks());
    outcomes.push(pa_invariance_check());
    outcomes.push(zero_spread_gain_check());
    outcomes.push(determinism_check());
    outcomes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_healthy_build() {
        let outcomes = run_invariant_suite();
        for outcome in &outcomes {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
        assert!(outcomes.len() >= 6);
    }
}
