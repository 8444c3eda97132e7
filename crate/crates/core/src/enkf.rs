//! Twin-experiment machinery: synthetic observations, a stochastic
//! (perturbed-observation) ensemble Kalman filter with Gaspari-Cohn
//! covariance localization and multiplicative inflation, and RMSE
//! diagnostics. The filter's analysis-mean sequence doubles as a
//! pseudo-trajectory for the Lyapunov-vector pipeline.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::EnkfError;
use crate::models::{
    exact_multiple, rk4_step_into, ModelSpec, Rk4Scratch, Trajectory, TrajectoryProvenance,
};

/// Linear observation operator with homogeneous Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    h: DMatrix<f64>,
    noise_std: f64,
    obs_interval: f64,
}

impl ObservationModel {
    pub fn new(h: DMatrix<f64>, noise_std: f64, obs_interval: f64) -> Result<Self, EnkfError> {
        let (p, d) = h.shape();
        if p == 0 || p > d {
            return Err(EnkfError::OperatorShape {
                rows: p,
                cols: d,
                dim: d,
            });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(EnkfError::InvalidObservationModel(
                "operator entries must be finite".into(),
            ));
        }
        if !(noise_std > 0.0) || !noise_std.is_finite() {
            return Err(EnkfError::InvalidObservationModel(format!(
                "noise std must be positive and finite, got {noise_std}"
            )));
        }
        if !(obs_interval > 0.0) {
            return Err(EnkfError::InvalidObservationModel(
                "observation interval must be positive".into(),
            ));
        }
        Ok(Self {
            h,
            noise_std,
            obs_interval,
        })
    }

    /// Unit-selector operator observing the given state components.
    pub fn select(
        indices: &[usize],
        dim: usize,
        noise_std: f64,
        obs_interval: f64,
    ) -> Result<Self, EnkfError> {
        let mut h = DMatrix::<f64>::zeros(indices.len(), dim);
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= dim {
                return Err(EnkfError::InvalidObservationModel(format!(
                    "observed index {idx} out of range for dimension {dim}"
                )));
            }
            h[(row, idx)] = 1.0;
        }
        Self::new(h, noise_std, obs_interval)
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn obs_interval(&self) -> f64 {
        self.obs_interval
    }

    pub fn dim_obs(&self) -> usize {
        self.h.nrows()
    }

    pub fn dim_state(&self) -> usize {
        self.h.ncols()
    }
}

/// Synthetic observations of a stored truth, `y_k = H x_k + eta_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub model: ObservationModel,
    pub seed: u64,
    /// Saved-sample stride between observations in the generating trajectory.
    pub sample_stride: usize,
    /// Time of the first observation (one interval after trajectory start).
    pub first_time: f64,
    pub values: Vec<DVector<f64>>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.first_time + k as f64 * self.model.obs_interval
    }
}

/// Observes the truth every `obs_interval` starting one interval after the
/// first sample, with independent N(0, mu^2 I) noise from a seeded stream.
pub fn generate_observations(
    truth: &Trajectory,
    obs_model: &ObservationModel,
    seed: u64,
) -> Result<ObservationSet, EnkfError> {
    if obs_model.dim_state() != truth.dim() {
        return Err(EnkfError::OperatorShape {
            rows: obs_model.dim_obs(),
            cols: obs_model.dim_state(),
            dim: truth.dim(),
        });
    }
    let stride = exact_multiple(obs_model.obs_interval, truth.save_interval).ok_or(
        EnkfError::IntervalMismatch {
            obs: obs_model.obs_interval,
            save: truth.save_interval,
        },
    )?;
    let n_obs = (truth.len() - 1) / stride;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let p = obs_model.dim_obs();
    let mu = obs_model.noise_std;
    let mut values = Vec::with_capacity(n_obs);
    for k in 1..=n_obs {
        let x = truth.state(k * stride);
        let mut y = &obs_model.h * x;
        for i in 0..p {
            let eta: f64 = StandardNormal.sample(&mut rng);
            y[i] += mu * eta;
        }
        values.push(y);
    }
    Ok(ObservationSet {
        model: obs_model.clone(),
        seed,
        sample_stride: stride,
        first_time: truth.sample_time(stride),
        values,
    })
}

/// Filter configuration for a twin experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkfConfig {
    pub ensemble_size: usize,
    /// Added to the true initial state to bias the initial ensemble mean.
    pub initial_mean_offset: DVector<f64>,
    /// Variance scale of the isotropic initial ensemble spread.
    pub initial_cov_scale: f64,
    /// Gaspari-Cohn localization radius in grid-index units (cyclic
    /// distance); `None` disables localization entirely (infinite radius).
    pub localization_radius: Option<f64>,
    /// Multiplicative anomaly inflation, >= 1.
    pub inflation: f64,
    pub seed: u64,
    /// Analysis steps discarded before the sequence is used downstream.
    pub burn_in: usize,
}

impl EnkfConfig {
    pub fn validate(&self, dim: usize) -> Result<(), EnkfError> {
        if self.ensemble_size < 2 {
            return Err(EnkfError::InvalidConfig(format!(
                "ensemble size must be >= 2, got {}",
                self.ensemble_size
            )));
        }
        if self.initial_mean_offset.len() != dim {
            return Err(EnkfError::InvalidConfig(format!(
                "initial mean offset has dimension {}, state dimension is {dim}",
                self.initial_mean_offset.len()
            )));
        }
        if self.initial_mean_offset.iter().any(|v| !v.is_finite()) {
            return Err(EnkfError::InvalidConfig("initial mean offset must be finite".into()));
        }
        if !(self.initial_cov_scale > 0.0) {
            return Err(EnkfError::InvalidConfig("initial covariance scale must be positive".into()));
        }
        if let Some(r) = self.localization_radius {
            if !(r > 0.0) {
                return Err(EnkfError::InvalidConfig(format!(
                    "localization radius must be positive, got {r}"
                )));
            }
        }
        if !(self.inflation >= 1.0) {
            return Err(EnkfError::InvalidConfig(format!(
                "inflation factor must be >= 1, got {}",
                self.inflation
            )));
        }
        Ok(())
    }
}

/// One filter run: analysis means and diagnostics, aligned with the
/// observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub config: EnkfConfig,
    pub obs_model: ObservationModel,
    pub obs_seed: u64,
    /// Analysis means at every observation time (burn-in NOT removed here;
    /// `analysis_trajectory` applies it).
    pub analysis_means: Vec<DVector<f64>>,
    /// Posterior ensemble spread per analysis step.
    pub spread: Vec<f64>,
    /// Analysis RMSE vs the twin truth per step.
    pub rmse: Vec<f64>,
    /// Time-mean analysis RMSE over the post-burn-in window.
    pub rmse_mean: f64,
    /// True when RMSE exceeded 5x the climatological spread of the truth
    /// for 100 consecutive analysis steps.
    pub diverged: bool,
    solver_step: f64,
    model: ModelSpec,
    first_time: f64,
}

impl FilterRun {
    /// The post-burn-in analysis-mean sequence as a pseudo-trajectory with
    /// one sample per observation time. The result is marked non-dynamical:
    /// it is near the true orbit but not a solution of the ODE.
    pub fn analysis_trajectory(&self) -> Result<Trajectory, EnkfError> {
        let b = self.config.burn_in;
        if b >= self.analysis_means.len() {
            return Err(EnkfError::InvalidConfig(format!(
                "burn-in {b} consumes the whole run of {} steps",
                self.analysis_means.len()
            )));
        }
        Trajectory::new(
            self.model.clone(),
            self.first_time + b as f64 * self.obs_model.obs_interval,
            self.solver_step,
            self.obs_model.obs_interval,
            TrajectoryProvenance::AnalysisMean,
            self.analysis_means[b..].to_vec(),
        )
        .map_err(EnkfError::Model)
    }
}

/// Standard fifth-order piecewise-rational compactly supported correlation
/// (support `2 r`, unit weight at zero separation, monotone nonincreasing).
pub fn gaspari_cohn(distance: f64, radius: f64) -> Result<f64, EnkfError> {
    if !(radius > 0.0) {
        return Err(EnkfError::InvalidConfig(format!(
            "localization radius must be positive, got {radius}"
        )));
    }
    let z = distance.abs() / radius;
    let w = if z <= 1.0 {
        -0.25 * z.powi(5) + 0.5 * z.powi(4) + 0.625 * z.powi(3) - (5.0 / 3.0) * z.powi(2) + 1.0
    } else if z < 2.0 {
        (1.0 / 12.0) * z.powi(5) - 0.5 * z.powi(4) + 0.625 * z.powi(3) + (5.0 / 3.0) * z.powi(2)
            - 5.0 * z
            + 4.0
            - (2.0 / 3.0) / z
    } else {
        0.0
    };
    Ok(w.clamp(0.0, 1.0))
}

/// Cyclic grid distance min(|i-k|, n-|i-k|).
pub fn cyclic_distance(i: usize, k: usize, n: usize) -> usize {
    let d = i.abs_diff(k);
    d.min(n - d)
}

fn localization_taper(dim: usize, radius: f64) -> Result<DMatrix<f64>, EnkfError> {
    let mut taper = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for k in i..dim {
            let w = gaspari_cohn(cyclic_distance(i, k, dim) as f64, radius)?;
            taper[(i, k)] = w;
            taper[(k, i)] = w;
        }
    }
    Ok(taper)
}

/// Evolves every ensemble member independently over `horizon` with RK4 steps
/// of size `dt`.
pub fn forecast_step(
    model: &ModelSpec,
    ensemble: &mut [DVector<f64>],
    horizon: f64,
    dt: f64,
) -> Result<(), EnkfError> {
    let steps = exact_multiple(horizon, dt).ok_or(EnkfError::IntervalMismatch {
        obs: horizon,
        save: dt,
    })?;
    let mut scratch = Rk4Scratch::new(model.dim());
    for member in ensemble.iter_mut() {
        for _ in 0..steps {
            rk4_step_into(model, member.as_mut_slice(), dt, &mut scratch);
        }
        if member.iter().any(|v| !v.is_finite()) {
            return Err(EnkfError::Model(crate::error::ModelError::BlowUp { t: horizon }));
        }
    }
    Ok(())
}

pub fn ensemble_mean(ensemble: &[DVector<f64>]) -> DVector<f64> {
    let mut mean = DVector::zeros(ensemble[0].len());
    for member in ensemble {
        mean += member;
    }
    mean / ensemble.len() as f64
}

/// Root-mean ensemble variance over components.
pub fn ensemble_spread(ensemble: &[DVector<f64>]) -> f64 {
    let n = ensemble.len();
    let d = ensemble[0].len();
    let mean = ensemble_mean(ensemble);
    let mut total = 0.0;
    for member in ensemble {
        total += (member - &mean).norm_squared();
    }
    (total / ((n - 1) as f64 * d as f64)).sqrt()
}

/// Stochastic (perturbed-observation) analysis update.
///
/// Anomalies are inflated multiplicatively, the sample covariance is tapered
/// entrywise by the Gaspari-Cohn correlation when a localization radius is
/// set, and every member assimilates its own perturbed copy of the
/// observation:
///
/// ```text
/// K = (L o P_f) H' (H (L o P_f) H' + mu^2 I)^{-1}
/// x_i <- x_i + K (y + eta_i - H x_i),   eta_i ~ N(0, mu^2 I)
/// ```
pub fn analysis_update(
    ensemble: &mut [DVector<f64>],
    y: &DVector<f64>,
    obs_model: &ObservationModel,
    config: &EnkfConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(), EnkfError> {
    let n = ensemble.len();
    let d = ensemble[0].len();
    let p = obs_model.dim_obs();
    if y.len() != p {
        return Err(EnkfError::Misaligned(format!(
            "observation has dimension {}, operator expects {p}",
            y.len()
        )));
    }
    if n < 2 {
        return Err(EnkfError::InvalidConfig(
            "analysis update needs at least 2 members".into(),
        ));
    }

    let mean = ensemble_mean(ensemble);
    if config.inflation != 1.0 {
        for member in ensemble.iter_mut() {
            *member = &mean + (&*member - &mean) * config.inflation;
        }
    }

    // Sample covariance of the (inflated) ensemble.
    let mut anomalies = DMatrix::<f64>::zeros(d, n);
    for (i, member) in ensemble.iter().enumerate() {
        anomalies.set_column(i, &(member - &mean));
    }
    let mut p_f = &anomalies * anomalies.transpose() / (n - 1) as f64;
    if let Some(radius) = config.localization_radius {
        let taper = localization_taper(d, radius)?;
        p_f.component_mul_assign(&taper);
    }

    let h = &obs_model.h;
    let mu = obs_model.noise_std;
    let pht = &p_f * h.transpose();
    let mut s = h * &pht;
    for i in 0..p {
        s[(i, i)] += mu * mu;
    }
    let chol = s.cholesky().ok_or(EnkfError::SingularInnovation)?;
    // K = P H' S^{-1}  computed as (S^{-1} (P H')')'
    let gain = chol.solve(&pht.transpose()).transpose();

    for member in ensemble.iter_mut() {
        let mut y_perturbed = y.clone();
        for i in 0..p {
            let eta: f64 = StandardNormal.sample(rng);
            y_perturbed[i] += mu * eta;
        }
        let innovation = y_perturbed - h * &*member;
        *member += &gain * innovation;
    }
    Ok(())
}

/// Per-step RMSE `sqrt(||a - b||^2 / d)` and its time mean.
pub fn rmse(
    estimates: &[DVector<f64>],
    truth: &[DVector<f64>],
) -> Result<(Vec<f64>, f64), EnkfError> {
    if estimates.len() != truth.len() {
        return Err(EnkfError::Misaligned(format!(
            "estimate sequence has {} entries, truth {}",
            estimates.len(),
            truth.len()
        )));
    }
    if estimates.is_empty() {
        return Err(EnkfError::Misaligned("empty sequences".into()));
    }
    let d = truth[0].len() as f64;
    let series: Vec<f64> = estimates
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| ((a - b).norm_squared() / d).sqrt())
        .collect();
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    Ok((series, mean))
}

/// Climatological spread of a trajectory: root-mean variance of each
/// component over time.
pub fn climatological_spread(traj: &Trajectory) -> f64 {
    let n = traj.len();
    let d = traj.dim();
    let mut mean = DVector::<f64>::zeros(d);
    for s in traj.states() {
        mean += s;
    }
    mean /= n as f64;
    let mut total = 0.0;
    for s in traj.states() {
        total += (s - &mean).norm_squared();
    }
    (total / (n as f64 * d as f64)).sqrt()
}

fn run_ensemble(
    truth: &Trajectory,
    obs: &ObservationSet,
    config: &EnkfConfig,
    assimilate: bool,
) -> Result<FilterRun, EnkfError> {
    let model = &truth.model;
    config.validate(model.dim())?;
    if obs.model.dim_state() != truth.dim() {
        return Err(EnkfError::OperatorShape {
            rows: obs.model.dim_obs(),
            cols: obs.model.dim_state(),
            dim: truth.dim(),
        });
    }
    let stride = obs.sample_stride;
    if truth.len() <= obs.len() * stride {
        return Err(EnkfError::Misaligned(format!(
            "truth has {} samples, observations need {}",
            truth.len(),
            obs.len() * stride + 1
        )));
    }
    if config.burn_in >= obs.len() {
        return Err(EnkfError::InvalidConfig(format!(
            "burn-in {} is not smaller than the number of assimilation steps {}",
            config.burn_in,
            obs.len()
        )));
    }

    let d = model.dim();
    let dt = truth.solver_step;
    let horizon = obs.model.obs_interval;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    // Initial ensemble around the biased initial mean.
    let x0 = truth.state(0) + &config.initial_mean_offset;
    let std0 = config.initial_cov_scale.sqrt();
    let mut ensemble: Vec<DVector<f64>> = (0..config.ensemble_size)
        .map(|_| {
            DVector::from_fn(d, |i, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                x0[i] + std0 * v
            })
        })
        .collect();

    let clim = climatological_spread(truth);
    let divergence_level = 5.0 * clim;
    let mut consecutive_bad = 0usize;
    let mut diverged = false;

    let n_steps = obs.len();
    let mut analysis_means = Vec::with_capacity(n_steps);
    let mut spread = Vec::with_capacity(n_steps);
    let mut rmse_series = Vec::with_capacity(n_steps);

    for k in 0..n_steps {
        forecast_step(model, &mut ensemble, horizon, dt)?;
        if assimilate {
            analysis_update(&mut ensemble, &obs.values[k], &obs.model, config, &mut rng)?;
        }
        let mean = ensemble_mean(&ensemble);
        let truth_state = truth.state((k + 1) * stride);
        let err = ((&mean - truth_state).norm_squared() / d as f64).sqrt();
        if err > divergence_level {
            consecutive_bad += 1;
            if consecutive_bad >= 100 {
                diverged = true;
            }
        } else {
            consecutive_bad = 0;
        }
        rmse_series.push(err);
        spread.push(ensemble_spread(&ensemble));
        analysis_means.push(mean);
    }

    let scoring = &rmse_series[config.burn_in..];
    let rmse_mean = scoring.iter().sum::<f64>() / scoring.len() as f64;

    Ok(FilterRun {
        config: config.clone(),
        obs_model: obs.model.clone(),
        obs_seed: obs.seed,
        analysis_means,
        spread,
        rmse: rmse_series,
        rmse_mean,
        diverged,
        solver_step: dt,
        model: model.clone(),
        first_time: obs.first_time,
    })
}

/// Full twin-experiment filter: alternate forecast and stochastic analysis
/// over every observation, recording analysis means, spread, and RMSE.
pub fn run_filter(
    truth: &Trajectory,
    obs: &ObservationSet,
    config: &EnkfConfig,
) -> Result<FilterRun, EnkfError> {
    run_ensemble(truth, obs, config, true)
}

/// The no-assimilation baseline: the same ensemble evolved through the same
/// schedule with the analysis step skipped. Its mean RMSE is the free-run
/// error the filter must beat.
pub fn run_free_ensemble(
    truth: &Trajectory,
    obs: &ObservationSet,
    config: &EnkfConfig,
) -> Result<FilterRun, EnkfError> {
    run_ensemble(truth, obs, config, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::integrate_trajectory;
    use approx::assert_relative_eq;

    fn l63_truth(total: f64) -> Trajectory {
        let model = ModelSpec::standard_lorenz63();
        let x0 = DVector::from_column_slice(&[1.0, 1.5, 20.0]);
        integrate_trajectory(&model, &x0, 20.0, total, 0.002, 0.01).unwrap()
    }

    fn default_config(dim: usize, seed: u64) -> EnkfConfig {
        EnkfConfig {
            ensemble_size: 10,
            initial_mean_offset: DVector::from_element(dim, 1.0),
            initial_cov_scale: 1.0,
            localization_radius: None,
            inflation: 1.0,
            seed,
            burn_in: 0,
        }
    }

    #[test]
    fn vanishing_noise_reproduces_projection() {
        let truth = l63_truth(1.0);
        let obs_model = ObservationModel::select(&[1], 3, 1e-12, 0.01).unwrap();
        let obs = generate_observations(&truth, &obs_model, 1).unwrap();
        for (k, y) in obs.values.iter().enumerate() {
            let expected = truth.state(k + 1)[1];
            assert!((y[0] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn observation_noise_moments() {
        let truth = l63_truth(100.0); // 10^4 observations
        let mu = 0.3;
        let obs_model = ObservationModel::select(&[0], 3, mu, 0.01).unwrap();
        let obs = generate_observations(&truth, &obs_model, 2).unwrap();
        let residuals: Vec<f64> = obs
            .values
            .iter()
            .enumerate()
            .map(|(k, y)| y[0] - truth.state(k + 1)[0])
            .collect();
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - mu).abs() / mu < 0.05);
    }

    #[test]
    fn interval_mismatch_is_rejected() {
        let truth = l63_truth(1.0);
        let obs_model = ObservationModel::select(&[0], 3, 0.1, 0.015).unwrap();
        assert!(matches!(
            generate_observations(&truth, &obs_model, 0),
            Err(EnkfError::IntervalMismatch { .. })
        ));
    }

    #[test]
    fn single_member_forecast_is_plain_integration() {
        let truth = l63_truth(0.5);
        let model = truth.model.clone();
        let mut ensemble = vec![truth.state(0).clone()];
        forecast_step(&model, &mut ensemble, 0.5, 0.002).unwrap();
        assert_eq!(&ensemble[0], truth.state(50));
    }

    #[test]
    fn forecast_commutes_with_permutation_and_preserves_zero_spread() {
        let model = ModelSpec::standard_lorenz63();
        let a = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let b = DVector::from_column_slice(&[-1.0, 0.5, 22.0]);
        let mut fwd = vec![a.clone(), b.clone()];
        let mut rev = vec![b, a];
        forecast_step(&model, &mut fwd, 0.1, 0.002).unwrap();
        forecast_step(&model, &mut rev, 0.1, 0.002).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);

        let same = DVector::from_column_slice(&[0.4, -0.3, 15.0]);
        let mut twin = vec![same.clone(), same];
        forecast_step(&model, &mut twin, 0.1, 0.002).unwrap();
        assert_eq!(twin[0], twin[1]);
    }

    #[test]
    fn zero_spread_analysis_leaves_ensemble_unchanged() {
        let state = DVector::from_column_slice(&[2.0, -1.0, 7.0]);
        let mut ensemble = vec![state.clone(), state.clone(), state.clone()];
        let obs_model = ObservationModel::select(&[0, 2], 3, 0.5, 0.01).unwrap();
        let config = default_config(3, 3);
        let y = DVector::from_column_slice(&[123.0, -55.0]); // arbitrary
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        analysis_update(&mut ensemble, &y, &obs_model, &config, &mut rng).unwrap();
        for member in &ensemble {
            assert_eq!(member, &state);
        }
    }

    /// Textbook scalar Kalman gain: d = p = 1, no localization/inflation.
    #[test]
    fn scalar_gain_matches_closed_form() {
        let mu = 0.7;
        let obs_model =
            ObservationModel::new(DMatrix::from_element(1, 1, 1.0), mu, 0.01).unwrap();
        let mut config = default_config(1, 4);
        config.ensemble_size = 400;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let members: Vec<DVector<f64>> = (0..400)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                DVector::from_element(1, 3.0 + 2.0 * v)
            })
            .collect();
        // forecast variance from this exact sample
        let mean_f = ensemble_mean(&members);
        let p_f = members
            .iter()
            .map(|m| (m[0] - mean_f[0]).powi(2))
            .sum::<f64>()
            / 399.0;
        let expected_gain = p_f / (p_f + mu * mu);

        // mean update: xbar_a = xbar_f + K (ybar_pert - xbar_f)
        let y = DVector::from_element(1, 5.0);
        let mut ensemble = members.clone();
        let mut update_rng = ChaCha12Rng::seed_from_u64(12);
        analysis_update(&mut ensemble, &y, &obs_model, &config, &mut update_rng).unwrap();
        let mean_a = ensemble_mean(&ensemble);

        // reconstruct the perturbed-observation mean with the same stream
        let mut replay = ChaCha12Rng::seed_from_u64(12);
        let mut y_mean = 0.0;
        for _ in 0..400 {
            let eta: f64 = StandardNormal.sample(&mut replay);
            y_mean += y[0] + mu * eta;
        }
        y_mean /= 400.0;
        let expected_mean = mean_f[0] + expected_gain * (y_mean - mean_f[0]);
        assert_relative_eq!(mean_a[0], expected_mean, epsilon = 1e-12);
    }

    #[test]
    fn gaspari_cohn_shape() {
        assert_relative_eq!(gaspari_cohn(0.0, 4.0).unwrap(), 1.0);
        assert_eq!(gaspari_cohn(8.0, 4.0).unwrap(), 0.0);
        assert_eq!(gaspari_cohn(9.5, 4.0).unwrap(), 0.0);
        let mut prev = 1.0;
        for i in 0..=80 {
            let w = gaspari_cohn(i as f64 * 0.1, 4.0).unwrap();
            assert!((0.0..=1.0).contains(&w));
            assert!(w <= prev + 1e-12, "not monotone at {i}");
            prev = w;
        }
        assert!(gaspari_cohn(1.0, 0.0).is_err());
    }

    #[test]
    fn huge_radius_matches_unlocalized_update() {
        let truth = l63_truth(0.1);
        let obs_model = ObservationModel::select(&[1], 3, 0.3, 0.01).unwrap();
        let y = DVector::from_element(1, 2.0);
        let mut rng_seed = ChaCha12Rng::seed_from_u64(21);
        let members: Vec<DVector<f64>> = (0..8)
            .map(|_| {
                DVector::from_fn(3, |i, _| {
                    let v: f64 = StandardNormal.sample(&mut rng_seed);
                    truth.state(0)[i] + v
                })
            })
            .collect();
        let mut plain = members.clone();
        let mut localized = members;
        let config_plain = default_config(3, 0);
        let mut config_loc = default_config(3, 0);
        config_loc.localization_radius = Some(1e15);
        let mut rng_a = ChaCha12Rng::seed_from_u64(33);
        let mut rng_b = ChaCha12Rng::seed_from_u64(33);
        analysis_update(&mut plain, &y, &obs_model, &config_plain, &mut rng_a).unwrap();
        analysis_update(&mut localized, &y, &obs_model, &config_loc, &mut rng_b).unwrap();
        for (a, b) in plain.iter().zip(localized.iter()) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    /// The analysis mean obeys the linear update equation
    /// `xbar_a = xbar_f + K (ybar_pert - H xbar_f)` with K recomputed
    /// independently from the forecast sample covariance.
    #[test]
    fn mean_update_equation_holds() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let members: Vec<DVector<f64>> = (0..12)
            .map(|_| DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let obs_model = ObservationModel::select(&[0, 2], 4, 0.4, 0.01).unwrap();
        let mut config = default_config(4, 5);
        config.ensemble_size = 12;
        config.localization_radius = Some(1.5);

        let mean_f = ensemble_mean(&members);
        let n = members.len();
        let mut anomalies = DMatrix::<f64>::zeros(4, n);
        for (i, m) in members.iter().enumerate() {
            anomalies.set_column(i, &(m - &mean_f));
        }
        let mut p_f = &anomalies * anomalies.transpose() / (n - 1) as f64;
        let taper = localization_taper(4, 1.5).unwrap();
        p_f.component_mul_assign(&taper);
        let h = obs_model.operator();
        let mut s = h * &p_f * h.transpose();
        for i in 0..2 {
            s[(i, i)] += 0.4 * 0.4;
        }
        let k_gain = &p_f * h.transpose() * s.try_inverse().unwrap();

        let y = DVector::from_column_slice(&[1.0, -2.0]);
        let mut ensemble = members.clone();
        let mut rng_update = ChaCha12Rng::seed_from_u64(99);
        analysis_update(&mut ensemble, &y, &obs_model, &config, &mut rng_update).unwrap();
        let mean_a = ensemble_mean(&ensemble);

        let mut replay = ChaCha12Rng::seed_from_u64(99);
        let mut y_mean = DVector::<f64>::zeros(2);
        for _ in 0..n {
            let mut yp = y.clone();
            for i in 0..2 {
                let eta: f64 = StandardNormal.sample(&mut replay);
                yp[i] += 0.4 * eta;
            }
            y_mean += yp;
        }
        y_mean /= n as f64;
        let expected = &mean_f + &k_gain * (y_mean - h * &mean_f);
        assert!((mean_a - expected).amax() < 1e-12);
    }

    #[test]
    fn filter_run_is_deterministic_and_bookkept() {
        let truth = l63_truth(5.0);
        let obs_model = ObservationModel::select(&[1], 3, 0.3, 0.01).unwrap();
        let obs = generate_observations(&truth, &obs_model, 7).unwrap();
        let mut config = default_config(3, 8);
        config.burn_in = 100;
        let a = run_filter(&truth, &obs, &config).unwrap();
        let b = run_filter(&truth, &obs, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.analysis_means.len(), obs.len());
        let pseudo = a.analysis_trajectory().unwrap();
        assert_eq!(pseudo.len(), obs.len() - config.burn_in);
        assert_eq!(pseudo.provenance, TrajectoryProvenance::AnalysisMean);
        assert!(!pseudo.provenance.is_dynamical());
    }

    #[test]
    fn rmse_closed_forms_and_cross_check() {
        let a = vec![
            DVector::from_column_slice(&[1.0, 2.0]),
            DVector::from_column_slice(&[3.0, 4.0]),
        ];
        let (series, mean) = rmse(&a, &a).unwrap();
        assert_eq!(series, vec![0.0, 0.0]);
        assert_eq!(mean, 0.0);

        let offset: Vec<DVector<f64>> = a.iter().map(|v| v.add_scalar(2.5)).collect();
        let (series, mean) = rmse(&offset, &a).unwrap();
        for s in &series {
            assert_relative_eq!(*s, 2.5, epsilon = 1e-14);
        }
        assert_relative_eq!(mean, 2.5, epsilon = 1e-14);

        // independent two-line reference on random data
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let xs: Vec<DVector<f64>> = (0..50)
            .map(|_| DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let ys: Vec<DVector<f64>> = (0..50)
            .map(|_| DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let (series, _) = rmse(&xs, &ys).unwrap();
        for (k, s) in series.iter().enumerate() {
            let reference = (xs[k]
                .iter()
                .zip(ys[k].iter())
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                / 5.0)
                .sqrt();
            assert_relative_eq!(*s, reference, epsilon = 1e-12);
        }

        assert!(rmse(&xs[..3], &ys[..2]).is_err());
    }
}
