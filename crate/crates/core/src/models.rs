//! Lorenz-63 and Lorenz-96 vector fields, analytic Jacobians, and the RK4
//! integrator producing uniformly sampled trajectories.

use nalgebra::{DMatrix, DVector};

use crate::error::ModelError;

/// Relative slack when checking that one interval is an integer multiple of
/// another (intervals are f64 and may carry one ulp of decimal noise).
const INTERVAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lorenz63,
    Lorenz96,
}

/// A concrete ODE system: kind, state dimension, and parameters.
///
/// Lorenz-63 (`sigma`, `rho`, `beta`):
/// ```text
/// dx/dt = sigma (y - x),   dy/dt = x (rho - z) - y,   dz/dt = x y - beta z
/// ```
///
/// Lorenz-96 with forcing `F` on a cyclic ring of `n >= 4` sites
/// (`x[k+n] = x[k]`):
/// ```text
/// dx[k]/dt = (x[k+1] - x[k-2]) x[k-1] - x[k] + F
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    kind: ModelKind,
    dim: usize,
    params: Vec<f64>,
}

impl ModelSpec {
    pub fn lorenz63(sigma: f64, rho: f64, beta: f64) -> Result<Self, ModelError> {
        for (name, v) in [("sigma", sigma), ("rho", rho), ("beta", beta)] {
            if !v.is_finite() {
                return Err(ModelError::InvalidParameter(format!("{name} is not finite")));
            }
        }
        Ok(Self {
            kind: ModelKind::Lorenz63,
            dim: 3,
            params: vec![sigma, rho, beta],
        })
    }

    /// Lorenz-63 with the classical chaotic parameters (10, 28, 8/3).
    pub fn standard_lorenz63() -> Self {
        Self::lorenz63(10.0, 28.0, 8.0 / 3.0).expect("classical parameters are finite")
    }

    pub fn lorenz96(dim: usize, forcing: f64) -> Result<Self, ModelError> {
        if dim < 4 {
            return Err(ModelError::InvalidParameter(format!(
                "Lorenz-96 needs dimension >= 4 for cyclic indexing, got {dim}"
            )));
        }
        if !forcing.is_finite() {
            return Err(ModelError::InvalidParameter("forcing is not finite".into()));
        }
        Ok(Self {
            kind: ModelKind::Lorenz96,
            dim,
            params: vec![forcing],
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// trace(J(x)), which is independent of x for both models:
    /// -(sigma + 1 + beta) for Lorenz-63 and -n for Lorenz-96.
    pub fn jacobian_trace(&self) -> f64 {
        match self.kind {
            ModelKind::Lorenz63 => -(self.params[0] + 1.0 + self.params[2]),
            ModelKind::Lorenz96 => -(self.dim as f64),
        }
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteState);
        }
        Ok(())
    }

    /// f(x), checked.
    pub fn vector_field(&self, x: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_state(x)?;
        let mut out = DVector::zeros(self.dim);
        self.rhs_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Analytic Jacobian J(x) with J[i][j] = df_i/dx_j, checked.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        self.check_state(x)?;
        let n = self.dim;
        let mut j = DMatrix::<f64>::zeros(n, n);
        match self.kind {
            ModelKind::Lorenz63 => {
                let (sigma, rho, _beta) = (self.params[0], self.params[1], self.params[2]);
                j[(0, 0)] = -sigma;
                j[(0, 1)] = sigma;
                j[(1, 0)] = rho - x[2];
                j[(1, 1)] = -1.0;
                j[(1, 2)] = -x[0];
                j[(2, 0)] = x[1];
                j[(2, 1)] = x[0];
                j[(2, 2)] = -self.params[2];
            }
            ModelKind::Lorenz96 => {
                // Each row has exactly 4 nonzero entries (cyclic structure).
                for k in 0..n {
                    let km1 = (k + n - 1) % n;
                    let km2 = (k + n - 2) % n;
                    let kp1 = (k + 1) % n;
                    j[(k, kp1)] += x[km1];
                    j[(k, km2)] += -x[km1];
                    j[(k, km1)] += x[kp1] - x[km2];
                    j[(k, k)] += -1.0;
                }
            }
        }
        Ok(j)
    }

    /// Unchecked f(x) into a preallocated slice; the integration hot path.
    pub(crate) fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelKind::Lorenz63 => {
                let (sigma, rho, beta) = (self.params[0], self.params[1], self.params[2]);
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
            ModelKind::Lorenz96 => {
                let n = self.dim;
                let f = self.params[0];
                for k in 0..n {
                    let km1 = (k + n - 1) % n;
                    let km2 = (k + n - 2) % n;
                    let kp1 = (k + 1) % n;
                    out[k] = (x[kp1] - x[km2]) * x[km1] - x[k] + f;
                }
            }
        }
    }

    /// Unchecked J(x)·B into a preallocated matrix, exploiting the sparse
    /// cyclic structure for Lorenz-96 instead of materializing J.
    pub(crate) fn jac_mul_into(&self, x: &[f64], b: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        let m = b.ncols();
        match self.kind {
            ModelKind::Lorenz63 => {
                let (sigma, rho, beta) = (self.params[0], self.params[1], self.params[2]);
                for c in 0..m {
                    let (b0, b1, b2) = (b[(0, c)], b[(1, c)], b[(2, c)]);
                    out[(0, c)] = sigma * (b1 - b0);
                    out[(1, c)] = (rho - x[2]) * b0 - b1 - x[0] * b2;
                    out[(2, c)] = x[1] * b0 + x[0] * b1 - beta * b2;
                }
            }
            ModelKind::Lorenz96 => {
                let n = self.dim;
                for c in 0..m {
                    for k in 0..n {
                        let km1 = (k + n - 1) % n;
                        let km2 = (k + n - 2) % n;
                        let kp1 = (k + 1) % n;
                        out[(k, c)] = x[km1] * (b[(kp1, c)] - b[(km2, c)])
                            + (x[kp1] - x[km2]) * b[(km1, c)]
                            - b[(k, c)];
                    }
                }
            }
        }
    }
}

/// Scratch buffers for repeated in-place RK4 steps.
pub(crate) struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4Scratch {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
        }
    }
}

/// One classical 4-stage RK4 step of dx/dt = f(x), in place, unchecked.
pub(crate) fn rk4_step_into(model: &ModelSpec, x: &mut [f64], dt: f64, s: &mut Rk4Scratch) {
    let n = x.len();
    model.rhs_into(x, &mut s.k1);
    for i in 0..n {
        s.stage[i] = x[i] + 0.5 * dt * s.k1[i];
    }
    model.rhs_into(&s.stage, &mut s.k2);
    for i in 0..n {
        s.stage[i] = x[i] + 0.5 * dt * s.k2[i];
    }
    model.rhs_into(&s.stage, &mut s.k3);
    for i in 0..n {
        s.stage[i] = x[i] + dt * s.k3[i];
    }
    model.rhs_into(&s.stage, &mut s.k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// One classical RK4 step, checked. A non-finite result signals blow-up
/// (step too large for the current state).
pub fn rk4_step(model: &ModelSpec, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>, ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "step must be positive, got {dt}"
        )));
    }
    model.check_state(x)?;
    let mut out = x.clone();
    let mut scratch = Rk4Scratch::new(model.dim());
    rk4_step_into(model, out.as_mut_slice(), dt, &mut scratch);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::BlowUp { t: dt });
    }
    Ok(out)
}

/// How a stored state sequence came to be. Perturbed and analysis-mean
/// sequences are not solutions of the ODE; downstream code treats them as
/// pseudo-trajectories and re-integrates the state from each stored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryProvenance {
    /// Produced by integrating the model; consecutive samples lie on one orbit.
    Integrated,
    /// A dynamical trajectory plus i.i.d. Gaussian noise at each sample.
    Perturbed,
    /// Ensemble-filter analysis means; near the true orbit but not on it.
    AnalysisMean,
}

impl TrajectoryProvenance {
    pub fn is_dynamical(&self) -> bool {
        matches!(self, TrajectoryProvenance::Integrated)
    }
}

/// A uniformly sampled state sequence: states at `t0 + j * save_interval`,
/// with `save_interval` an exact integer multiple of the solver step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub model: ModelSpec,
    pub t0: f64,
    pub solver_step: f64,
    pub save_interval: f64,
    pub provenance: TrajectoryProvenance,
    states: Vec<DVector<f64>>,
}

/// Checks that `outer` is a positive integer multiple of `inner` and
/// returns the multiplier.
pub fn exact_multiple(outer: f64, inner: f64) -> Option<usize> {
    if !(inner > 0.0) || !(outer > 0.0) {
        return None;
    }
    let ratio = outer / inner;
    let k = ratio.round();
    if k >= 1.0 && (ratio - k).abs() <= INTERVAL_TOL * ratio.max(1.0) {
        Some(k as usize)
    } else {
        None
    }
}

impl Trajectory {
    pub fn new(
        model: ModelSpec,
        t0: f64,
        solver_step: f64,
        save_interval: f64,
        provenance: TrajectoryProvenance,
        states: Vec<DVector<f64>>,
    ) -> Result<Self, ModelError> {
        if states.is_empty() {
            return Err(ModelError::InvalidTrajectory("no states".into()));
        }
        exact_multiple(save_interval, solver_step).ok_or_else(|| {
            ModelError::InvalidTrajectory(format!(
                "save interval {save_interval} is not an integer multiple of solver step {solver_step}"
            ))
        })?;
        for (j, s) in states.iter().enumerate() {
            if s.len() != model.dim() {
                return Err(ModelError::DimensionMismatch {
                    expected: model.dim(),
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidTrajectory(format!(
                    "non-finite state at sample {j}"
                )));
            }
        }
        Ok(Self {
            model,
            t0,
            solver_step,
            save_interval,
            provenance,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn state(&self, j: usize) -> &DVector<f64> {
        &self.states[j]
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn sample_time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.save_interval
    }

    /// Fine solver steps per saved sample.
    pub fn steps_per_save(&self) -> usize {
        exact_multiple(self.save_interval, self.solver_step)
            .expect("validated at construction")
    }

    /// The tail of the trajectory starting at sample `from` (inclusive),
    /// with `t0` shifted accordingly.
    pub fn slice_from(&self, from: usize) -> Result<Trajectory, ModelError> {
        if from >= self.states.len() {
            return Err(ModelError::InvalidTrajectory(format!(
                "slice start {from} out of range ({} samples)",
                self.states.len()
            )));
        }
        Ok(Trajectory {
            model: self.model.clone(),
            t0: self.sample_time(from),
            solver_step: self.solver_step,
            save_interval: self.save_interval,
            provenance: self.provenance,
            states: self.states[from..].to_vec(),
        })
    }
}

/// Integrates the model from `x0`, discards a spin-up transient entirely,
/// then saves one state every `save_interval` for `total_time`. The first
/// saved state is the post-spin-up state, so the result holds
/// `total_time / save_interval + 1` samples.
pub fn integrate_trajectory(
    model: &ModelSpec,
    x0: &DVector<f64>,
    spinup_time: f64,
    total_time: f64,
    solver_step: f64,
    save_interval: f64,
) -> Result<Trajectory, ModelError> {
    model.check_state(x0)?;
    if !(solver_step > 0.0) {
        return Err(ModelError::InvalidParameter("solver step must be positive".into()));
    }
    let steps_per_save = exact_multiple(save_interval, solver_step).ok_or_else(|| {
        ModelError::InvalidTrajectory(format!(
            "save interval {save_interval} is not an integer multiple of solver step {solver_step}"
        ))
    })?;
    let n_saves = exact_multiple(total_time, save_interval).ok_or_else(|| {
        ModelError::InvalidTrajectory(format!(
            "total time {total_time} is not an integer multiple of save interval {save_interval}"
        ))
    })?;
    let spinup_steps = if spinup_time == 0.0 {
        0
    } else {
        exact_multiple(spinup_time, solver_step).ok_or_else(|| {
            ModelError::InvalidTrajectory(format!(
                "spin-up time {spinup_time} is not an integer multiple of solver step {solver_step}"
            ))
        })?
    };

    let mut scratch = Rk4Scratch::new(model.dim());
    let mut x = x0.clone();
    for s in 0..spinup_steps {
        rk4_step_into(model, x.as_mut_slice(), solver_step, &mut scratch);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::BlowUp {
                t: (s + 1) as f64 * solver_step,
            });
        }
    }

    let mut states = Vec::with_capacity(n_saves + 1);
    states.push(x.clone());
    for j in 0..n_saves {
        for _ in 0..steps_per_save {
            rk4_step_into(model, x.as_mut_slice(), solver_step, &mut scratch);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::BlowUp {
                t: spinup_time + (j + 1) as f64 * save_interval,
            });
        }
        states.push(x.clone());
    }

    Trajectory::new(
        model.clone(),
        0.0,
        solver_step,
        save_interval,
        TrajectoryProvenance::Integrated,
        states,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn l63() -> ModelSpec {
        ModelSpec::standard_lorenz63()
    }

    #[test]
    fn l63_origin_is_fixed_point() {
        let f = l63().vector_field(&DVector::zeros(3)).unwrap();
        assert_eq!(f, DVector::zeros(3));
    }

    #[test]
    fn l96_uniform_state_is_fixed_point() {
        let model = ModelSpec::lorenz96(40, 8.0).unwrap();
        let x = DVector::from_element(40, 8.0);
        let f = model.vector_field(&x).unwrap();
        assert_eq!(f, DVector::zeros(40));
    }

    #[test]
    fn l63_hand_evaluated_point() {
        let f = l63()
            .vector_field(&DVector::from_column_slice(&[1.0, 1.0, 1.0]))
            .unwrap();
        assert_relative_eq!(f[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(f[1], 26.0, epsilon = 1e-13);
        assert_relative_eq!(f[2], 1.0 - 8.0 / 3.0, epsilon = 1e-13);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = l63().vector_field(&DVector::zeros(4)).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }));
        let err = l63()
            .vector_field(&DVector::from_column_slice(&[f64::NAN, 0.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteState));
    }

    #[test]
    fn jacobian_traces_are_analytic_constants() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let j = l63().jacobian(&x).unwrap();
            assert_relative_eq!(j.trace(), -41.0 / 3.0, epsilon = 1e-13);
        }
        let model = ModelSpec::lorenz96(10, 8.0).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(10, |_, _| StandardNormal.sample(&mut rng));
            let j = model.jacobian(&x).unwrap();
            assert_relative_eq!(j.trace(), -10.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn l96_jacobian_rows_have_four_nonzeros() {
        let model = ModelSpec::lorenz96(10, 8.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = DVector::from_fn(10, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v + 3.0
        });
        let j = model.jacobian(&x).unwrap();
        for k in 0..10 {
            let nz = (0..10).filter(|&c| j[(k, c)] != 0.0).count();
            assert_eq!(nz, 4, "row {k}");
        }
    }

    /// Central-difference oracle for the analytic Jacobian at random
    /// attractor points of both models.
    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-5;
        for model in [l63(), ModelSpec::lorenz96(8, 8.0).unwrap()] {
            let d = model.dim();
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            let x0 = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let traj =
                integrate_trajectory(&model, &x0, 20.0, 100.0, 0.01, 1.0).unwrap();
            for s in 0..100 {
                let x = traj.state(s);
                let j = model.jacobian(x).unwrap();
                for k in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (model.vector_field(&xp).unwrap()
                        - model.vector_field(&xm).unwrap())
                        / (2.0 * h);
                    let col = j.column(k).clone_owned();
                    let rel = (&fd - &col).norm() / col.norm().max(1.0);
                    assert!(rel < 1e-6, "sample {s} column {k}: rel err {rel:e}");
                }
            }
        }
    }

    #[test]
    fn jac_mul_matches_dense_product() {
        for model in [l63(), ModelSpec::lorenz96(12, 8.0).unwrap()] {
            let d = model.dim();
            let mut rng = ChaCha12Rng::seed_from_u64(4);
            let x = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let b = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
            let dense = model.jacobian(&x).unwrap() * &b;
            let mut fast = DMatrix::zeros(d, d);
            model.jac_mul_into(x.as_slice(), &b, &mut fast);
            assert!((dense - fast).amax() < 1e-12);
        }
    }

    #[test]
    fn rk4_preserves_fixed_points_exactly() {
        let x = rk4_step(&l63(), &DVector::zeros(3), 0.01).unwrap();
        assert_eq!(x, DVector::zeros(3));
        let model = ModelSpec::lorenz96(6, 8.0).unwrap();
        let fp = DVector::from_element(6, 8.0);
        let x = rk4_step(&model, &fp, 0.05).unwrap();
        assert_eq!(x, fp);
    }

    /// Richardson order check: against a delta-t = 1e-5 reference over
    /// t in [0, 0.1], halving the step shrinks the error by about 2^4.
    #[test]
    fn rk4_is_fourth_order() {
        let model = l63();
        let x0 = DVector::from_column_slice(&[1.0, 2.0, 20.0]);
        let run = |dt: f64| -> DVector<f64> {
            let mut x = x0.clone();
            let mut scratch = Rk4Scratch::new(3);
            let steps = (0.1 / dt).round() as usize;
            for _ in 0..steps {
                rk4_step_into(&model, x.as_mut_slice(), dt, &mut scratch);
            }
            x
        };
        let reference = run(1e-5);
        let e_coarse = (run(2e-3) - &reference).norm();
        let e_fine = (run(1e-3) - &reference).norm();
        let ratio = e_coarse / e_fine;
        assert!(
            (12.0..24.0).contains(&ratio),
            "expected ~16x error reduction, got {ratio}"
        );
    }

    #[test]
    fn minimal_trajectory_has_two_states() {
        let traj = integrate_trajectory(
            &l63(),
            &DVector::from_column_slice(&[1.0, 1.0, 1.0]),
            0.0,
            0.01,
            0.002,
            0.01,
        )
        .unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.state(0), &DVector::from_column_slice(&[1.0, 1.0, 1.0]));
    }

    /// Long spin-up lands on the attractor and the orbit stays inside the
    /// classical bounding box (max |z| < 60 measured on a long reference run).
    #[test]
    fn l63_orbit_stays_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x0 = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
        let traj = integrate_trajectory(&l63(), &x0, 500.0, 350.0, 0.002, 0.01).unwrap();
        let max_z = traj
            .states()
            .iter()
            .map(|s| s[2].abs())
            .fold(0.0f64, f64::max);
        assert!(max_z < 60.0, "max |z| = {max_z}");
    }

    #[test]
    fn integration_is_deterministic() {
        let x0 = DVector::from_column_slice(&[0.3, -0.2, 0.1]);
        let a = integrate_trajectory(&l63(), &x0, 10.0, 5.0, 0.002, 0.01).unwrap();
        let b = integrate_trajectory(&l63(), &x0, 10.0, 5.0, 0.002, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interval_validation() {
        let x0 = DVector::zeros(3);
        assert!(integrate_trajectory(&l63(), &x0, 0.0, 0.01, 0.002, 0.005).is_err());
        assert!(ModelSpec::lorenz96(3, 8.0).is_err());
        assert!(ModelSpec::lorenz63(f64::INFINITY, 28.0, 1.0).is_err());
    }
}
