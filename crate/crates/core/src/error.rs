//! Error types for the numerical layers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("state has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in state")]
    NonFiniteState,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("integration blew up (non-finite state) at t = {t}")]
    BlowUp { t: f64 },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is rank deficient (zero pivot in column {col})")]
    RankDeficient { col: usize },
    #[error("expected {expected}, got {rows}x{cols}")]
    Shape {
        expected: String,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Error)]
pub enum TangentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("perturbation matrix has {rows} rows, state dimension is {dim}")]
    BlockShape { rows: usize, dim: usize },
    #[error("perturbation matrix must have between 1 and {dim} columns, got {cols}")]
    ColumnCount { dim: usize, cols: usize },
}

#[derive(Debug, Error)]
pub enum GinelliError {
    #[error(transparent)]
    Tangent(#[from] TangentError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("trajectory has {got} samples, schedule needs {needed}")]
    TrajectoryTooShort { needed: usize, got: usize },
    #[error("rank collapse: |R_{{{index},{index}}}| = {value:e} at QR step {step}")]
    RankCollapse { step: usize, index: usize, value: f64 },
    #[error("zero column {col} in coefficient matrix during backward sweep")]
    ZeroColumn { col: usize },
    #[error("misaligned BLV/coefficient sequences: {blvs} vs {coeffs}")]
    MisalignedSequences { blvs: usize, coeffs: usize },
    #[error("cumulative exponent sum never becomes negative; spectrum is not dissipative")]
    NotDissipative,
    #[error("exponents must be sorted nonincreasing")]
    UnsortedExponents,
}

#[derive(Debug, Error)]
pub enum EnkfError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("observation operator is {rows}x{cols}, state dimension is {dim}")]
    OperatorShape { rows: usize, cols: usize, dim: usize },
    #[error("invalid observation model: {0}")]
    InvalidObservationModel(String),
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("observation interval {obs} is not a multiple of the save interval {save}")]
    IntervalMismatch { obs: f64, save: f64 },
    #[error("innovation covariance is singular (degenerate ensemble or zero noise)")]
    SingularInnovation,
    #[error("sequences are misaligned: {0}")]
    Misaligned(String),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("empty basis")]
    EmptyBasis,
    #[error("empty series")]
    EmptySeries,
    #[error("subspace dimension {k} out of range (basis has {m} columns)")]
    SubspaceDim { k: usize, m: usize },
    #[error("bases live in different ambient dimensions: {0} vs {1}")]
    AmbientMismatch(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}
