//! Tangent-space propagation: joint RK4 integration of the state and the
//! variational equation, giving the action of the tangent linear propagator
//! on a block of perturbation vectors.

use nalgebra::{DMatrix, DVector};

use crate::error::TangentError;
use crate::models::{ModelSpec, Trajectory};

/// A block of perturbation vectors attached to a base state.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBlock {
    pub base_state: DVector<f64>,
    /// d x m matrix of perturbation vectors (columns), 1 <= m <= d.
    pub columns: DMatrix<f64>,
}

/// `y += alpha * x` entrywise for dynamically sized matrices.
fn mat_axpy(y: &mut DMatrix<f64>, alpha: f64, x: &DMatrix<f64>) {
    y.zip_apply(x, |yi, xi| *yi += alpha * xi);
}

/// Scratch buffers for the joint (x, B) RK4 stages.
struct JointScratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    xs: Vec<f64>,
    m1: DMatrix<f64>,
    m2: DMatrix<f64>,
    m3: DMatrix<f64>,
    m4: DMatrix<f64>,
    bs: DMatrix<f64>,
}

impl JointScratch {
    fn new(dim: usize, cols: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            xs: vec![0.0; dim],
            m1: DMatrix::zeros(dim, cols),
            m2: DMatrix::zeros(dim, cols),
            m3: DMatrix::zeros(dim, cols),
            m4: DMatrix::zeros(dim, cols),
            bs: DMatrix::zeros(dim, cols),
        }
    }
}

/// One RK4 step of the coupled system (dx/dt = f(x), dB/dt = J(x) B).
fn joint_rk4_step(
    model: &ModelSpec,
    x: &mut [f64],
    b: &mut DMatrix<f64>,
    dt: f64,
    s: &mut JointScratch,
) {
    let n = x.len();
    model.rhs_into(x, &mut s.k1);
    model.jac_mul_into(x, b, &mut s.m1);

    for i in 0..n {
        s.xs[i] = x[i] + 0.5 * dt * s.k1[i];
    }
    s.bs.copy_from(b);
    mat_axpy(&mut s.bs, 0.5 * dt, &s.m1);
    model.rhs_into(&s.xs, &mut s.k2);
    model.jac_mul_into(&s.xs, &s.bs, &mut s.m2);

    for i in 0..n {
        s.xs[i] = x[i] + 0.5 * dt * s.k2[i];
    }
    s.bs.copy_from(b);
    mat_axpy(&mut s.bs, 0.5 * dt, &s.m2);
    model.rhs_into(&s.xs, &mut s.k3);
    model.jac_mul_into(&s.xs, &s.bs, &mut s.m3);

    for i in 0..n {
        s.xs[i] = x[i] + dt * s.k3[i];
    }
    s.bs.copy_from(b);
    mat_axpy(&mut s.bs, dt, &s.m3);
    model.rhs_into(&s.xs, &mut s.k4);
    model.jac_mul_into(&s.xs, &s.bs, &mut s.m4);

    for i in 0..n {
        x[i] += dt / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
    mat_axpy(b, dt / 6.0, &s.m1);
    mat_axpy(b, 2.0 * dt / 6.0, &s.m2);
    mat_axpy(b, 2.0 * dt / 6.0, &s.m3);
    mat_axpy(b, dt / 6.0, &s.m4);
}

fn validate_block(model: &ModelSpec, b: &DMatrix<f64>) -> Result<(), TangentError> {
    let d = model.dim();
    if b.nrows() != d {
        return Err(TangentError::BlockShape {
            rows: b.nrows(),
            dim: d,
        });
    }
    if b.ncols() == 0 || b.ncols() > d {
        return Err(TangentError::ColumnCount {
            dim: d,
            cols: b.ncols(),
        });
    }
    Ok(())
}

/// Propagates the state `x` and the perturbation block `b` jointly for
/// `steps` RK4 steps of size `dt`. The returned block is the action of the
/// tangent linear propagator over the interval applied to `b`, up to
/// integrator error; the tangent dynamics is re-derived from the supplied
/// base state, never from an externally integrated orbit.
pub fn propagate_tangent(
    model: &ModelSpec,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    steps: usize,
    dt: f64,
) -> Result<TangentBlock, TangentError> {
    model.vector_field(x)?; // dimension + finiteness check
    validate_block(model, b)?;
    if !(dt > 0.0) {
        return Err(TangentError::Model(crate::error::ModelError::InvalidParameter(
            format!("step must be positive, got {dt}"),
        )));
    }
    let mut xw = x.clone();
    let mut bw = b.clone();
    let mut scratch = JointScratch::new(model.dim(), b.ncols());
    for s in 0..steps {
        joint_rk4_step(model, xw.as_mut_slice(), &mut bw, dt, &mut scratch);
        if xw.iter().any(|v| !v.is_finite()) || bw.iter().any(|v| !v.is_finite()) {
            return Err(TangentError::Model(crate::error::ModelError::BlowUp {
                t: (s + 1) as f64 * dt,
            }));
        }
    }
    Ok(TangentBlock {
        base_state: xw,
        columns: bw,
    })
}

/// The full d x d finite-time propagator over `steps` RK4 steps, i.e.
/// `propagate_tangent` applied to the identity.
pub fn finite_time_propagator(
    model: &ModelSpec,
    x: &DVector<f64>,
    steps: usize,
    dt: f64,
) -> Result<DMatrix<f64>, TangentError> {
    let d = model.dim();
    if steps == 0 {
        model.vector_field(x)?;
        return Ok(DMatrix::identity(d, d));
    }
    let block = propagate_tangent(model, x, &DMatrix::identity(d, d), steps, dt)?;
    Ok(block.columns)
}

/// Propagates a perturbation block along `n_saves` consecutive saved samples
/// of a stored trajectory, re-initializing the base state from the stored
/// sample at every save time. For an integrated trajectory this reproduces
/// continuous propagation bit-for-bit; for perturbed or analysis-mean
/// pseudo-trajectories it is the defining construction: the ODE is re-solved
/// from each stored sample over each gap.
pub fn propagate_along(
    traj: &Trajectory,
    start: usize,
    n_saves: usize,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>, TangentError> {
    let steps = traj.steps_per_save();
    let dt = traj.solver_step;
    if start + n_saves >= traj.len() + 1 {
        return Err(TangentError::Model(
            crate::error::ModelError::InvalidTrajectory(format!(
                "propagation over saves {start}..{} exceeds trajectory length {}",
                start + n_saves,
                traj.len()
            )),
        ));
    }
    let mut block = b.clone();
    for s in 0..n_saves {
        let out = propagate_tangent(&traj.model, traj.state(start + s), &block, steps, dt)?;
        block = out.columns;
    }
    Ok(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::integrate_trajectory;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Test-only matrix exponential by scaling-and-squaring on the Taylor
    /// series; independent of the RK4 path it checks.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let norm = a.amax();
        let squarings = norm.log2().ceil().max(0.0) as u32 + 4;
        let scaled = a / 2f64.powi(squarings as i32);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = DMatrix::<f64>::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..squarings {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn zero_block_stays_zero() {
        let model = ModelSpec::standard_lorenz63();
        let x = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let b = DMatrix::zeros(3, 2);
        let out = propagate_tangent(&model, &x, &b, 50, 0.002).unwrap();
        assert_eq!(out.columns, DMatrix::zeros(3, 2));
    }

    /// At the uniform Lorenz-96 fixed point the Jacobian is constant, so the
    /// propagator equals the matrix exponential exactly (up to RK4 order).
    #[test]
    fn matches_matrix_exponential_at_fixed_point() {
        let model = ModelSpec::lorenz96(6, 8.0).unwrap();
        let x = DVector::from_element(6, 8.0);
        let steps = 100;
        let dt = 0.001;
        let b = random_matrix(6, 3, 7);
        let out = propagate_tangent(&model, &x, &b, steps, dt).unwrap();
        let j = model.jacobian(&x).unwrap();
        let expected = expm(&(j * (steps as f64 * dt))) * &b;
        assert!(
            (&out.columns - &expected).amax() < 1e-8,
            "diff {:e}",
            (&out.columns - &expected).amax()
        );
    }

    #[test]
    fn propagation_is_linear_in_the_block() {
        let model = ModelSpec::standard_lorenz63();
        let x = DVector::from_column_slice(&[-3.0, 4.0, 21.0]);
        let b1 = random_matrix(3, 2, 1);
        let b2 = random_matrix(3, 2, 2);
        let lhs = propagate_tangent(&model, &x, &(&b1 + &b2), 25, 0.002)
            .unwrap()
            .columns;
        let rhs = propagate_tangent(&model, &x, &b1, 25, 0.002).unwrap().columns
            + propagate_tangent(&model, &x, &b2, 25, 0.002).unwrap().columns;
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn zero_steps_gives_identity() {
        let model = ModelSpec::standard_lorenz63();
        let x = DVector::from_column_slice(&[1.0, 1.0, 1.0]);
        let m = finite_time_propagator(&model, &x, 0, 0.002).unwrap();
        assert_eq!(m, DMatrix::identity(3, 3));
    }

    /// Cocycle property: the propagator over two QR intervals is the product
    /// of the propagators over each, evaluated along the same orbit.
    #[test]
    fn propagator_composes() {
        let model = ModelSpec::standard_lorenz63();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x0 = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
        let traj = integrate_trajectory(&model, &x0, 30.0, 0.1, 0.002, 0.01).unwrap();
        let l = 5; // saved steps per leg
        let whole = propagate_along(&traj, 0, 2 * l, &DMatrix::identity(3, 3)).unwrap();
        let first = propagate_along(&traj, 0, l, &DMatrix::identity(3, 3)).unwrap();
        let second = propagate_along(&traj, l, l, &DMatrix::identity(3, 3)).unwrap();
        let composed = &second * &first;
        let rel = (&whole - &composed).amax() / whole.amax();
        assert!(rel < 1e-8, "relative composition error {rel:e}");
    }

    /// det M = exp(trace * T) for the constant-divergence Lorenz-63 flow.
    #[test]
    fn determinant_identity_for_constant_divergence() {
        let model = ModelSpec::standard_lorenz63();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x0 = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
        let traj = integrate_trajectory(&model, &x0, 30.0, 0.01, 0.002, 0.01).unwrap();
        let m = propagate_along(&traj, 0, 1, &DMatrix::identity(3, 3)).unwrap();
        let expected = (model.jacobian_trace() * 0.01).exp();
        let rel = (m.determinant() - expected).abs() / expected;
        assert!(rel < 1e-6, "relative determinant error {rel:e}");
    }

    #[test]
    fn shape_errors() {
        let model = ModelSpec::standard_lorenz63();
        let x = DVector::from_column_slice(&[1.0, 1.0, 1.0]);
        assert!(propagate_tangent(&model, &x, &DMatrix::zeros(4, 2), 1, 0.01).is_err());
        assert!(propagate_tangent(&model, &x, &DMatrix::zeros(3, 4), 1, 0.01).is_err());
        assert!(propagate_tangent(&model, &x, &DMatrix::zeros(3, 0), 1, 0.01).is_err());
    }
}
