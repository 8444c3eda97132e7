//! Experiment configuration: a sectioned TOML file mapped onto the pipeline
//! types, with exhaustive validation (every problem is reported, not just
//! the first) and a canonical hash for provenance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use clv_core::enkf::{EnkfConfig, ObservationModel};
use clv_core::ginelli::GinelliSchedule;
use clv_core::models::ModelSpec;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub trajectory: TrajectorySection,
    pub ginelli: GinelliSection,
    pub source: SourceSection,
    #[serde(default)]
    pub observations: Option<ObservationsSection>,
    #[serde(default)]
    pub enkf: Option<EnkfSection>,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: String,
    pub master_seed: u64,
    /// 0 means all available parallelism.
    #[serde(default)]
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub forcing: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub solver_step: f64,
    pub save_interval: f64,
    pub spinup: f64,
    pub forward_transient: f64,
    pub sampling_window: f64,
    pub backward_transient: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GinelliSection {
    pub qr_interval: usize,
    /// Number of tangent vectors carried; defaults to the state dimension.
    #[serde(default)]
    pub num_vectors: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    /// "truth" | "perturbed" | "assimilated"
    pub kind: String,
    #[serde(default)]
    pub sigma_grid: Vec<f64>,
    #[serde(default)]
    pub mu_grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObservationsSection {
    /// Unit-selector rows: observe these state components.
    #[serde(default)]
    pub observed_indices: Vec<usize>,
    /// Alternative: explicit operator rows (overrides observed_indices).
    #[serde(default)]
    pub operator_rows: Vec<Vec<f64>>,
    pub obs_interval: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnkfSection {
    pub ensemble_size: usize,
    /// Scalar offset added to every component of the true initial state.
    pub initial_mean_offset: f64,
    pub initial_cov_scale: f64,
    #[serde(default)]
    pub localization_radius: Option<f64>,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    pub burn_in: usize,
}

fn default_inflation() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Subspace dimensions for principal-angle tables; empty skips them.
    #[serde(default)]
    pub k_grid: Vec<usize>,
    /// Haar-random baseline realizations per subspace dimension (0 skips).
    #[serde(default)]
    pub random_realizations: usize,
    /// Stride over window samples when accumulating angle series.
    #[serde(default = "default_step")]
    pub angle_step: usize,
    /// Stride over window samples in the vector-geometry table.
    #[serde(default = "default_step")]
    pub geometry_step: usize,
}

fn default_step() -> usize {
    1
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            k_grid: Vec::new(),
            random_realizations: 0,
            angle_step: default_step(),
            geometry_step: default_step(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    /// Also write binary trajectory / Lyapunov-set containers.
    #[serde(default = "default_true")]
    pub write_binaries: bool,
}

fn default_out_dir() -> String {
    "out".into()
}

fn default_true() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            write_binaries: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Truth,
    Perturbed,
    Assimilated,
}

impl SourceKind {
    pub fn label(&self) -> &'static str {
        match self {
            SourceKind::Truth => "truth",
            SourceKind::Perturbed => "perturbed",
            SourceKind::Assimilated => "assimilated",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml_str(&text)
    }

    /// SHA-256 of the canonical (re-serialized) config, hex-encoded. Two
    /// configs that resolve to the same effective settings hash identically
    /// regardless of formatting or comments in the source file.
    pub fn canonical_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn source_kind(&self) -> Result<SourceKind, String> {
        match self.source.kind.as_str() {
            "truth" => Ok(SourceKind::Truth),
            "perturbed" => Ok(SourceKind::Perturbed),
            "assimilated" => Ok(SourceKind::Assimilated),
            other => Err(format!(
                "source.kind must be one of truth|perturbed|assimilated, got {other:?}"
            )),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec, String> {
        match self.model.kind.as_str() {
            "lorenz63" => {
                let sigma = self.model.sigma.ok_or("model.sigma is required for lorenz63")?;
                let rho = self.model.rho.ok_or("model.rho is required for lorenz63")?;
                let beta = self.model.beta.ok_or("model.beta is required for lorenz63")?;
                if let Some(d) = self.model.dimension {
                    if d != 3 {
                        return Err(format!("model.dimension must be 3 for lorenz63, got {d}"));
                    }
                }
                ModelSpec::lorenz63(sigma, rho, beta).map_err(|e| e.to_string())
            }
            "lorenz96" => {
                let dim = self
                    .model
                    .dimension
                    .ok_or("model.dimension is required for lorenz96")?;
                let forcing = self.model.forcing.ok_or("model.forcing is required for lorenz96")?;
                ModelSpec::lorenz96(dim, forcing).map_err(|e| e.to_string())
            }
            other => Err(format!(
                "model.kind must be lorenz63 or lorenz96, got {other:?}"
            )),
        }
    }

    pub fn num_vectors(&self) -> Result<usize, String> {
        let d = self.model_spec()?.dim();
        let m = self.ginelli.num_vectors.unwrap_or(d);
        if m == 0 || m > d {
            return Err(format!(
                "ginelli.num_vectors must be in 1..={d}, got {m}"
            ));
        }
        Ok(m)
    }

    pub fn schedule(&self) -> Result<GinelliSchedule, String> {
        GinelliSchedule::from_times(
            self.ginelli.qr_interval,
            self.trajectory.save_interval,
            self.trajectory.forward_transient,
            self.trajectory.sampling_window,
            self.trajectory.backward_transient,
        )
        .map_err(|e| e.to_string())
    }

    pub fn observation_model(&self, noise_std: f64) -> Result<ObservationModel, String> {
        let obs = self
            .observations
            .as_ref()
            .ok_or("assimilated source needs an [observations] section")?;
        let d = self.model_spec()?.dim();
        if !obs.operator_rows.is_empty() {
            let p = obs.operator_rows.len();
            for (i, row) in obs.operator_rows.iter().enumerate() {
                if row.len() != d {
                    return Err(format!(
                        "observations.operator_rows[{i}] has {} entries, state dimension is {d}",
                        row.len()
                    ));
                }
            }
            let h = DMatrix::from_fn(p, d, |r, c| obs.operator_rows[r][c]);
            ObservationModel::new(h, noise_std, obs.obs_interval).map_err(|e| e.to_string())
        } else {
            ObservationModel::select(&obs.observed_indices, d, noise_std, obs.obs_interval)
                .map_err(|e| e.to_string())
        }
    }

    pub fn enkf_config(&self, seed: u64) -> Result<EnkfConfig, String> {
        let enkf = self
            .enkf
            .as_ref()
            .ok_or("assimilated source needs an [enkf] section")?;
        let d = self.model_spec()?.dim();
        Ok(EnkfConfig {
            ensemble_size: enkf.ensemble_size,
            initial_mean_offset: DVector::from_element(d, enkf.initial_mean_offset),
            initial_cov_scale: enkf.initial_cov_scale,
            localization_radius: enkf.localization_radius,
            inflation: enkf.inflation,
            seed,
            burn_in: enkf.burn_in,
        })
    }

    /// Validates everything, collecting the complete list of problems.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        fn check(errors: &mut Vec<String>, r: Result<(), String>) {
            if let Err(e) = r {
                errors.push(e);
            }
        }

        if self.experiment.id.is_empty() {
            errors.push("experiment.id must not be empty".into());
        }
        if self
            .experiment
            .id
            .contains(|c: char| c == '/' || c == '\\' || c.is_whitespace())
        {
            errors.push("experiment.id must not contain path separators or whitespace".into());
        }

        check(&mut errors, self.model_spec().map(|_| ()));
        check(&mut errors, self.num_vectors().map(|_| ()));

        let t = &self.trajectory;
        for (name, v) in [
            ("trajectory.solver_step", t.solver_step),
            ("trajectory.save_interval", t.save_interval),
            ("trajectory.forward_transient", t.forward_transient),
            ("trajectory.sampling_window", t.sampling_window),
            ("trajectory.backward_transient", t.backward_transient),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                errors.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(t.spinup >= 0.0) || !t.spinup.is_finite() {
            errors.push(format!("trajectory.spinup must be >= 0, got {}", t.spinup));
        }
        if clv_core::models::exact_multiple(t.save_interval, t.solver_step).is_none() {
            errors.push(format!(
                "trajectory.save_interval {} must be an integer multiple of solver_step {}",
                t.save_interval, t.solver_step
            ));
        }
        check(&mut errors, self.schedule().map(|_| ()));

        match self.source_kind() {
            Err(e) => errors.push(e),
            Ok(SourceKind::Truth) => {}
            Ok(SourceKind::Perturbed) => {
                if self.source.sigma_grid.is_empty() {
                    errors.push("source.sigma_grid must be nonempty for perturbed source".into());
                }
                for &s in &self.source.sigma_grid {
                    if !(s >= 0.0) || !s.is_finite() {
                        errors.push(format!("sigma grid value {s} must be finite and >= 0"));
                    }
                }
            }
            Ok(SourceKind::Assimilated) => {
                if self.source.mu_grid.is_empty() {
                    errors.push("source.mu_grid must be nonempty for assimilated source".into());
                }
                for &mu in &self.source.mu_grid {
                    if !(mu > 0.0) || !mu.is_finite() {
                        errors.push(format!("mu grid value {mu} must be finite and > 0"));
                    }
                }
                match &self.observations {
                    None => errors.push("assimilated source needs an [observations] section".into()),
                    Some(obs) => {
                        if obs.observed_indices.is_empty() && obs.operator_rows.is_empty() {
                            errors.push(
                                "observations needs observed_indices or operator_rows".into(),
                            );
                        }
                        // Analysis means must land exactly on trajectory samples
                        // so vectors from both runs can be compared time-for-time.
                        if (obs.obs_interval - t.save_interval).abs()
                            > 1e-9 * t.save_interval.max(1.0)
                        {
                            errors.push(format!(
                                "observations.obs_interval {} must equal trajectory.save_interval {} for assimilated experiments",
                                obs.obs_interval, t.save_interval
                            ));
                        }
                        if let Ok(()) = self.source_kind().map(|_| ()) {
                            if let Err(e) = self.observation_model(1.0) {
                                errors.push(e);
                            }
                        }
                    }
                }
                match &self.enkf {
                    None => errors.push("assimilated source needs an [enkf] section".into()),
                    Some(_) => {
                        if let Ok(spec) = self.model_spec() {
                            if let Ok(cfg) = self.enkf_config(0) {
                                if let Err(e) = cfg.validate(spec.dim()) {
                                    errors.push(e.to_string());
                                }
                            }
                        }
                    }
                }
            }
        }

        if let Ok(m) = self.num_vectors() {
            for &k in &self.metrics.k_grid {
                if k == 0 || k > m {
                    errors.push(format!(
                        "metrics.k_grid value {k} must be in 1..={m} (num_vectors)"
                    ));
                }
            }
        }
        if self.metrics.angle_step == 0 {
            errors.push("metrics.angle_step must be >= 1".into());
        }
        if self.metrics.geometry_step == 0 {
            errors.push("metrics.geometry_step must be >= 1".into());
        }
        if self.output.dir.is_empty() {
            errors.push("output.dir must not be empty".into());
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const L63_MINIMAL: &str = r#"
[experiment]
id = "t"
master_seed = 1

[model]
kind = "lorenz63"
sigma = 10.0
rho = 28.0
beta = 2.6666666666666665

[trajectory]
solver_step = 0.002
save_interval = 0.01
spinup = 1.0
forward_transient = 0.1
sampling_window = 0.1
backward_transient = 0.1

[ginelli]
qr_interval = 1

[source]
kind = "truth"
"#;

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg = ExperimentConfig::from_toml_str(L63_MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model_spec().unwrap().dim(), 3);
        assert_eq!(cfg.num_vectors().unwrap(), 3);
        let schedule = cfg.schedule().unwrap();
        assert_eq!(schedule.n_forward, 10);
    }

    #[test]
    fn validation_collects_all_errors() {
        let mut cfg = ExperimentConfig::from_toml_str(L63_MINIMAL).unwrap();
        cfg.experiment.id = "".into();
        cfg.trajectory.save_interval = 0.003; // not a multiple of solver_step
        cfg.source.kind = "perturbed".into(); // grid missing
        let errors = cfg.validate().unwrap_err();
        assert!(errors.len() >= 3, "got {errors:?}");
    }

    #[test]
    fn hash_is_formatting_independent() {
        let a = ExperimentConfig::from_toml_str(L63_MINIMAL).unwrap();
        let reformatted = format!("# a comment\n{}", L63_MINIMAL.replace("10.0", "10.00"));
        let b = ExperimentConfig::from_toml_str(&reformatted).unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());
        let mut c = a.clone();
        c.experiment.master_seed = 2;
        assert_ne!(a.canonical_hash(), c.canonical_hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = format!("{L63_MINIMAL}\n[bogus]\nx = 1\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }
}
