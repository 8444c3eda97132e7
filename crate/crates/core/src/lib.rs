//! Backward and covariant Lyapunov vectors of chaotic ODE systems.
//!
//! The crate provides the numerical building blocks for computing Lyapunov
//! exponents, backward Lyapunov vectors (BLVs) and covariant Lyapunov
//! vectors (CLVs) along a stored trajectory, together with the machinery to
//! produce that trajectory three different ways:
//!
//! * [`models`] — Lorenz-63 / Lorenz-96 vector fields, analytic Jacobians,
//!   and an RK4 integrator producing uniformly sampled trajectories;
//! * [`perturb`] — Gaussian-perturbed copies of a true trajectory;
//! * [`enkf`] — a stochastic ensemble Kalman filter whose analysis-mean
//!   sequence serves as a pseudo-trajectory.
//!
//! The Lyapunov machinery itself lives in [`tangent`] (variational
//! integration) and [`ginelli`] (forward QR sweep, backward triangular
//! sweep, CLV assembly). [`metrics`] compares vectors and Oseledets
//! subspaces from two runs via acute angles and principal angles.
//!
//! All stochastic operations are seeded explicitly and are bit-reproducible
//! for a fixed seed.

pub mod enkf;
pub mod error;
pub mod ginelli;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod perturb;
pub mod tangent;

pub use error::{EnkfError, GinelliError, LinalgError, MetricsError, ModelError, TangentError};
pub use models::{ModelKind, ModelSpec, Trajectory, TrajectoryProvenance};
