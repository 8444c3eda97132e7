//! Experiment orchestration: wires models -> (truth | perturb | enkf) ->
//! tangent/ginelli -> metrics according to one config, and writes the
//! result tables.
//!
//! Grid points (sigma values, mu values, baseline realizations) are
//! independent and run on the rayon pool, each drawing its own seed stream;
//! tables are merged and written single-threaded in grid order so repeated
//! runs are byte-identical.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use clv_core::enkf::{generate_observations, run_filter, FilterRun, ObservationSet};
use clv_core::error::{EnkfError, GinelliError, MetricsError, ModelError, TangentError};
use clv_core::ginelli::{
    assemble_clvs, backward_sweep, forward_sweep, random_upper_triangular, standard_basis_block,
    GinelliSchedule, LyapunovSet,
};
use clv_core::metrics::{
    acute_angle, principal_angles, random_orthonormal_subspace, subspace_from_blvs, summarize,
    AngleSeries, AngleSummary,
};
use clv_core::models::{integrate_trajectory, ModelSpec, Trajectory};
use clv_core::perturb::{perturb_trajectory, PerturbationSpec};
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ExperimentConfig, SourceKind};
use crate::io::{self, Cell, IoError, Table, TableMeta};
use crate::seeds::{float_label, stream_seed};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tangent(#[from] TangentError),
    #[error(transparent)]
    Ginelli(#[from] GinelliError),
    #[error(transparent)]
    Enkf(#[from] EnkfError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Other(String),
}

/// A validated config together with the resolved pipeline pieces.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub schedule: GinelliSchedule,
    pub num_vectors: usize,
    pub source: SourceKind,
    pub config_hash: String,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate().map_err(HarnessError::Config)?;
        let model = config.model_spec().map_err(|e| HarnessError::Other(e))?;
        let schedule = config.schedule().map_err(|e| HarnessError::Other(e))?;
        let num_vectors = config.num_vectors().map_err(|e| HarnessError::Other(e))?;
        let source = config.source_kind().map_err(|e| HarnessError::Other(e))?;
        let config_hash = config.canonical_hash();
        Ok(Self {
            config,
            model,
            schedule,
            num_vectors,
            source,
            config_hash,
        })
    }

    pub fn master_seed(&self) -> u64 {
        self.config.experiment.master_seed
    }

    /// Saved samples prepended before the Lyapunov window so the filter can
    /// spin up; zero unless the source is assimilated.
    pub fn burn_prefix_samples(&self) -> usize {
        match (&self.source, &self.config.enkf) {
            (SourceKind::Assimilated, Some(enkf)) => enkf.burn_in + 1,
            _ => 0,
        }
    }

    /// Integrates the reference trajectory: seeded standard-normal initial
    /// condition, spin-up discarded, then `burn_prefix + required` samples.
    pub fn truth_full(&self) -> Result<Trajectory, HarnessError> {
        let d = self.model.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(self.master_seed(), "truth/init"));
        let x0 = nalgebra::DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let dt_save = self.config.trajectory.save_interval;
        let n_saves = self.burn_prefix_samples() + self.schedule.required_samples() - 1;
        let total_time = n_saves as f64 * dt_save;
        Ok(integrate_trajectory(
            &self.model,
            &x0,
            self.config.trajectory.spinup,
            total_time,
            self.config.trajectory.solver_step,
            dt_save,
        )?)
    }

    /// The window of the full truth that the Lyapunov sweeps run on.
    pub fn truth_window(&self, truth_full: &Trajectory) -> Result<Trajectory, HarnessError> {
        Ok(truth_full.slice_from(self.burn_prefix_samples())?)
    }

    /// Upper-triangular seed for the backward sweep; `alt` draws the second,
    /// independent stream used by convergence diagnostics.
    pub fn backward_seed(&self, alt: bool) -> DMatrix<f64> {
        let label = if alt { "ginelli/useed/alt" } else { "ginelli/useed" };
        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(self.master_seed(), label));
        random_upper_triangular(self.num_vectors, &mut rng)
    }

    /// Full Ginelli pipeline on one trajectory.
    pub fn lyapunov(&self, traj: &Trajectory) -> Result<LyapunovSet, HarnessError> {
        let b0 = standard_basis_block(self.model.dim(), self.num_vectors);
        let (history, exponents) = forward_sweep(traj, &b0, &self.schedule)?;
        if history.forward_drift_deg > 1.0 {
            log::warn!(
                "basis drift over the last 10% of the forward transient is {:.3} degrees; \
                 consider a longer transient",
                history.forward_drift_deg
            );
        }
        let coefficients = backward_sweep(&history, &self.backward_seed(false))?;
        Ok(assemble_clvs(&history, coefficients, exponents)?)
    }

    pub fn perturbed(&self, window: &Trajectory, sigma: f64) -> Result<Trajectory, HarnessError> {
        let label = format!("perturb/sigma={}", float_label(sigma));
        let spec = PerturbationSpec::new(sigma, stream_seed(self.master_seed(), &label))?;
        Ok(perturb_trajectory(window, &spec))
    }

    pub fn observations(
        &self,
        truth_full: &Trajectory,
        mu: f64,
    ) -> Result<ObservationSet, HarnessError> {
        let obs_model = self
            .config
            .observation_model(mu)
            .map_err(HarnessError::Other)?;
        let label = format!("obs/mu={}", float_label(mu));
        Ok(generate_observations(
            truth_full,
            &obs_model,
            stream_seed(self.master_seed(), &label),
        )?)
    }

    pub fn assimilate(
        &self,
        truth_full: &Trajectory,
        obs: &ObservationSet,
        mu: f64,
    ) -> Result<FilterRun, HarnessError> {
        let label = format!("enkf/mu={}", float_label(mu));
        let enkf_config = self
            .config
            .enkf_config(stream_seed(self.master_seed(), &label))
            .map_err(HarnessError::Other)?;
        Ok(run_filter(truth_full, obs, &enkf_config)?)
    }
}

/// Per-index angle summaries between two aligned Lyapunov sets.
pub struct AngleRow {
    pub vector_kind: &'static str,
    pub vector_index: usize,
    pub summary: AngleSummary,
    pub n_samples: usize,
}

pub fn angle_summaries(
    reference: &LyapunovSet,
    other: &LyapunovSet,
    step: usize,
) -> Result<Vec<AngleRow>, HarnessError> {
    if reference.num_samples() != other.num_samples() {
        return Err(HarnessError::Other(format!(
            "Lyapunov sets are misaligned: {} vs {} window samples",
            reference.num_samples(),
            other.num_samples()
        )));
    }
    let m = reference.num_vectors().min(other.num_vectors());
    let mut rows = Vec::with_capacity(2 * m);
    for (kind, frames_a, frames_b) in [
        ("BLV", &reference.blvs, &other.blvs),
        ("CLV", &reference.clvs, &other.clvs),
    ] {
        for index in 0..m {
            let mut values = Vec::new();
            for j in (0..reference.num_samples()).step_by(step) {
                let a = frames_a[j].column(index).clone_owned();
                let b = frames_b[j].column(index).clone_owned();
                values.push(acute_angle(&a, &b)?);
            }
            let n_samples = values.len();
            let summary = summarize(&AngleSeries { values_deg: values })?;
            rows.push(AngleRow {
                vector_kind: kind,
                vector_index: index + 1,
                summary,
                n_samples,
            });
        }
    }
    Ok(rows)
}

/// Principal-angle summaries between leading-k BLV subspaces of two aligned
/// Lyapunov sets, for every k in the grid.
pub struct PaRow {
    pub subspace_dim: usize,
    pub pa_index: usize,
    pub summary: AngleSummary,
}

pub fn pa_summaries(
    reference: &LyapunovSet,
    other: &LyapunovSet,
    k_grid: &[usize],
    step: usize,
) -> Result<Vec<PaRow>, HarnessError> {
    if reference.num_samples() != other.num_samples() {
        return Err(HarnessError::Other(
            "Lyapunov sets are misaligned for principal angles".into(),
        ));
    }
    let mut rows = Vec::new();
    for &k in k_grid {
        let mut series: Vec<Vec<f64>> = vec![Vec::new(); k];
        for j in (0..reference.num_samples()).step_by(step) {
            let p = subspace_from_blvs(reference, j, k)?;
            let q = subspace_from_blvs(other, j, k)?;
            let angles = principal_angles(&p, &q)?;
            for (i, a) in angles.into_iter().enumerate() {
                series[i].push(a);
            }
        }
        for (i, values) in series.into_iter().enumerate() {
            let summary = summarize(&AngleSeries { values_deg: values })?;
            rows.push(PaRow {
                subspace_dim: k,
                pa_index: i + 1,
                summary,
            });
        }
    }
    Ok(rows)
}

/// Haar-random baseline: principal angles between random k-subspaces and the
/// reference BLV subspace at the middle of the window, summarized over
/// realizations per index.
pub fn random_pa_baseline(
    reference: &LyapunovSet,
    k_grid: &[usize],
    realizations: usize,
    master_seed: u64,
) -> Result<Vec<PaRow>, HarnessError> {
    let mid = reference.num_samples() / 2;
    let d = reference.dim();
    let mut rows = Vec::new();
    for &k in k_grid {
        let p = subspace_from_blvs(reference, mid, k)?;
        let mut series: Vec<Vec<f64>> = vec![Vec::new(); k];
        for rep in 0..realizations {
            let label = format!("metrics/random-subspace/k={k}/rep={rep}");
            let q = random_orthonormal_subspace(d, k, stream_seed(master_seed, &label))?;
            let angles = principal_angles(&p, &q)?;
            for (i, a) in angles.into_iter().enumerate() {
                series[i].push(a);
            }
        }
        for (i, values) in series.into_iter().enumerate() {
            let summary = summarize(&AngleSeries { values_deg: values })?;
            rows.push(PaRow {
                subspace_dim: k,
                pa_index: i + 1,
                summary,
            });
        }
    }
    Ok(rows)
}

pub const ANGLE_COLUMNS: [&str; 9] = [
    "experiment_id",
    "source",
    "param_value",
    "vector_kind",
    "vector_index",
    "median_deg",
    "p25_deg",
    "p75_deg",
    "n_samples",
];

pub const PA_COLUMNS: [&str; 8] = [
    "experiment_id",
    "source",
    "param_value",
    "subspace_dim",
    "pa_index",
    "median_deg",
    "p25_deg",
    "p75_deg",
];

pub const EXPONENT_COLUMNS: [&str; 6] = [
    "experiment_id",
    "source",
    "param_value",
    "exp_index",
    "lambda",
    "abs_error_vs_truth",
];

pub const RMSE_COLUMNS: [&str; 6] = [
    "experiment_id",
    "source",
    "param_value",
    "step",
    "rmse",
    "spread",
];

pub const GEOMETRY_COLUMNS: [&str; 16] = [
    "experiment_id",
    "source",
    "param_value",
    "sample_index",
    "time",
    "state_first",
    "state_last",
    "clv1_first",
    "clv1_last",
    "clv2_first",
    "clv2_last",
    "clv3_first",
    "clv3_last",
    "cos_12",
    "cos_13",
    "cos_23",
];

pub fn push_angle_rows(
    table: &mut Table,
    id: &str,
    source: &str,
    param: f64,
    rows: &[AngleRow],
) {
    for r in rows {
        table.push(vec![
            Cell::from(id),
            Cell::from(source),
            Cell::from(param),
            Cell::from(r.vector_kind),
            Cell::from(r.vector_index),
            Cell::from(r.summary.median),
            Cell::from(r.summary.p25),
            Cell::from(r.summary.p75),
            Cell::from(r.n_samples),
        ]);
    }
}

pub fn push_pa_rows(table: &mut Table, id: &str, source: &str, param: f64, rows: &[PaRow]) {
    for r in rows {
        table.push(vec![
            Cell::from(id),
            Cell::from(source),
            Cell::from(param),
            Cell::from(r.subspace_dim),
            Cell::from(r.pa_index),
            Cell::from(r.summary.median),
            Cell::from(r.summary.p25),
            Cell::from(r.summary.p75),
        ]);
    }
}

pub fn push_exponent_rows(
    table: &mut Table,
    id: &str,
    source: &str,
    param: f64,
    exponents: &[f64],
    truth: &[f64],
) {
    for (i, &lambda) in exponents.iter().enumerate() {
        table.push(vec![
            Cell::from(id),
            Cell::from(source),
            Cell::from(param),
            Cell::from(i + 1),
            Cell::from(lambda),
            Cell::from((lambda - truth[i]).abs()),
        ]);
    }
}

/// Geometry rows for the first three vectors: first/last components of each
/// CLV and the mutual-angle cosines, following the trajectory through the
/// window. Only emitted when at least three vectors are carried.
pub fn push_geometry_rows(
    table: &mut Table,
    id: &str,
    source: &str,
    param: f64,
    lyap: &LyapunovSet,
    traj: &Trajectory,
    step: usize,
) {
    if lyap.num_vectors() < 3 {
        return;
    }
    let d = lyap.dim();
    for j in (0..lyap.num_samples()).step_by(step) {
        let save = lyap.window_save_index(j);
        let x = traj.state(save);
        let c = &lyap.clvs[j];
        let cos = |a: usize, b: usize| -> f64 { c.column(a).dot(&c.column(b)) };
        table.push(vec![
            Cell::from(id),
            Cell::from(source),
            Cell::from(param),
            Cell::from(j),
            Cell::from(traj.sample_time(save)),
            Cell::from(x[0]),
            Cell::from(x[d - 1]),
            Cell::from(c[(0, 0)]),
            Cell::from(c[(d - 1, 0)]),
            Cell::from(c[(0, 1)]),
            Cell::from(c[(d - 1, 1)]),
            Cell::from(c[(0, 2)]),
            Cell::from(c[(d - 1, 2)]),
            Cell::from(cos(0, 1)),
            Cell::from(cos(0, 2)),
            Cell::from(cos(1, 2)),
        ]);
    }
}

/// Diagnostics for one grid point, reported in the run summary and the
/// sidecar metadata.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SourceDiagnostics {
    pub source: String,
    pub param_value: f64,
    pub exponents: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged: Option<bool>,
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub tables: Vec<String>,
    pub diagnostics: Vec<SourceDiagnostics>,
}

struct GridOutcome {
    param: f64,
    lyap: LyapunovSet,
    traj: Trajectory,
    filter: Option<FilterRun>,
}

/// Runs the whole experiment described by the config and writes every table
/// (and, when enabled, the binary intermediates) under `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
) -> Result<RunSummary, HarnessError> {
    let pipeline = Pipeline::new(config.clone())?;
    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    std::fs::create_dir_all(&out_dir).map_err(IoError::Io)?;

    let id = config.experiment.id.clone();
    let write_bin = config.output.write_binaries;

    let truth_full = pipeline.truth_full()?;
    let truth_window = pipeline.truth_window(&truth_full)?;
    let truth_lyap = pipeline.lyapunov(&truth_window)?;
    log::info!(
        "truth window: {} samples, spectrum head {:?}",
        truth_window.len(),
        &truth_lyap.exponents[..truth_lyap.num_vectors().min(3)]
    );

    if write_bin {
        io::write_trajectory(&out_dir.join("truth_full.bin"), &truth_full)?;
        io::write_trajectory(&out_dir.join("truth_window.bin"), &truth_window)?;
        io::write_lyapunov_set(&out_dir.join("truth_lyapunov.bin"), &truth_lyap)?;
    }

    let mut angles = Table::new("angles", ANGLE_COLUMNS.to_vec());
    let mut pa = Table::new("pa", PA_COLUMNS.to_vec());
    let mut exponents = Table::new("exponents", EXPONENT_COLUMNS.to_vec());
    let mut rmse_table = Table::new("rmse", RMSE_COLUMNS.to_vec());
    let mut geometry = Table::new("clv_geometry", GEOMETRY_COLUMNS.to_vec());
    let mut diagnostics = Vec::new();

    push_exponent_rows(
        &mut exponents,
        &id,
        "truth",
        0.0,
        &truth_lyap.exponents,
        &truth_lyap.exponents,
    );
    push_geometry_rows(
        &mut geometry,
        &id,
        "truth",
        0.0,
        &truth_lyap,
        &truth_window,
        config.metrics.geometry_step,
    );
    diagnostics.push(SourceDiagnostics {
        source: "truth".into(),
        param_value: 0.0,
        exponents: truth_lyap.exponents.clone(),
        rmse_mean: None,
        diverged: None,
    });

    let source_label = pipeline.source.label();
    let outcomes: Vec<GridOutcome> = match pipeline.source {
        SourceKind::Truth => Vec::new(),
        SourceKind::Perturbed => {
            let grid = config.source.sigma_grid.clone();
            grid.par_iter()
                .map(|&sigma| -> Result<GridOutcome, HarnessError> {
                    let noisy = pipeline.perturbed(&truth_window, sigma)?;
                    let lyap = pipeline.lyapunov(&noisy)?;
                    Ok(GridOutcome {
                        param: sigma,
                        lyap,
                        traj: noisy,
                        filter: None,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        SourceKind::Assimilated => {
            let grid = config.source.mu_grid.clone();
            grid.par_iter()
                .map(|&mu| -> Result<GridOutcome, HarnessError> {
                    let obs = pipeline.observations(&truth_full, mu)?;
                    let run = pipeline.assimilate(&truth_full, &obs, mu)?;
                    if run.diverged {
                        log::warn!("filter diverged at mu = {mu}");
                    }
                    let pseudo = run.analysis_trajectory()?;
                    if write_bin {
                        io::write_observations(
                            &out_dir.join(format!("observations_mu{}.bin", float_label(mu))),
                            &obs,
                        )?;
                    }
                    let lyap = pipeline.lyapunov(&pseudo)?;
                    Ok(GridOutcome {
                        param: mu,
                        lyap,
                        traj: pseudo,
                        filter: Some(run),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };

    for outcome in &outcomes {
        let param = outcome.param;
        let label = float_label(param);
        if write_bin {
            let stem = match pipeline.source {
                SourceKind::Perturbed => format!("perturbed_sigma{label}"),
                SourceKind::Assimilated => format!("analysis_mu{label}"),
                SourceKind::Truth => unreachable!("truth source has no grid"),
            };
            io::write_trajectory(&out_dir.join(format!("{stem}.bin")), &outcome.traj)?;
            io::write_lyapunov_set(
                &out_dir.join(format!("lyapunov_{label}.bin")),
                &outcome.lyap,
            )?;
        }

        let angle_rows = angle_summaries(&truth_lyap, &outcome.lyap, config.metrics.angle_step)?;
        push_angle_rows(&mut angles, &id, source_label, param, &angle_rows);

        if !config.metrics.k_grid.is_empty() {
            let pa_rows = pa_summaries(
                &truth_lyap,
                &outcome.lyap,
                &config.metrics.k_grid,
                config.metrics.angle_step,
            )?;
            push_pa_rows(&mut pa, &id, source_label, param, &pa_rows);
        }

        push_exponent_rows(
            &mut exponents,
            &id,
            source_label,
            param,
            &outcome.lyap.exponents,
            &truth_lyap.exponents,
        );
        push_geometry_rows(
            &mut geometry,
            &id,
            source_label,
            param,
            &outcome.lyap,
            &outcome.traj,
            config.metrics.geometry_step,
        );

        if let Some(run) = &outcome.filter {
            for (step, (err, spread)) in run.rmse.iter().zip(run.spread.iter()).enumerate() {
                rmse_table.push(vec![
                    Cell::from(&id[..]),
                    Cell::from(source_label),
                    Cell::from(param),
                    Cell::from(step + 1),
                    Cell::from(*err),
                    Cell::from(*spread),
                ]);
            }
        }

        diagnostics.push(SourceDiagnostics {
            source: source_label.into(),
            param_value: param,
            exponents: outcome.lyap.exponents.clone(),
            rmse_mean: outcome.filter.as_ref().map(|r| r.rmse_mean),
            diverged: outcome.filter.as_ref().map(|r| r.diverged),
        });
    }

    if !config.metrics.k_grid.is_empty() && config.metrics.random_realizations > 0 {
        let rows = random_pa_baseline(
            &truth_lyap,
            &config.metrics.k_grid,
            config.metrics.random_realizations,
            pipeline.master_seed(),
        )?;
        push_pa_rows(&mut pa, &id, "random", 0.0, &rows);
    }

    let mut meta = TableMeta::new(&id, &pipeline.config_hash, pipeline.master_seed());
    meta.units.insert("median_deg".into(), "degrees".into());
    meta.units.insert("p25_deg".into(), "degrees".into());
    meta.units.insert("p75_deg".into(), "degrees".into());
    meta.units.insert("lambda".into(), "1/time".into());
    meta.units.insert("time".into(), "model time".into());
    meta.notes = Some(serde_json::json!({ "diagnostics": diagnostics }));

    let mut written = Vec::new();
    for table in [&angles, &pa, &exponents, &rmse_table, &geometry] {
        if table.rows.is_empty() {
            continue;
        }
        io::write_table(&out_dir, table, &meta)?;
        written.push(table.name.clone());
    }

    Ok(RunSummary {
        out_dir,
        tables: written,
        diagnostics,
    })
}
