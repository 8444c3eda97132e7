//! Comparison metrics: acute angles between Lyapunov vectors, principal
//! angles between Oseledets subspaces via SVD, Haar-random subspace
//! baselines, and median/percentile summaries.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::MetricsError;
use crate::ginelli::LyapunovSet;
use crate::linalg::qr_positive;

/// Angles in degrees at successive sample times for one fixed vector index
/// or principal-angle index.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSeries {
    pub values_deg: Vec<f64>,
}

/// Median and quartiles of an angle series, degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleSummary {
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

/// Sign-blind acute angle between two nonzero vectors, in degrees:
/// `arccos(clamp(|u.v| / (||u|| ||v||), 0, 1))`.
pub fn acute_angle(u: &DVector<f64>, v: &DVector<f64>) -> Result<f64, MetricsError> {
    if u.len() != v.len() {
        return Err(MetricsError::AmbientMismatch(u.len(), v.len()));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    let c = (u.dot(v).abs() / (nu * nv)).clamp(0.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Principal angles between the column spans of `p` and `q`, in degrees,
/// sorted nondecreasing. Inputs are defensively re-orthonormalized, then
/// the angles are `arccos` of the singular values of `pᵀq`.
pub fn principal_angles(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Vec<f64>, MetricsError> {
    if p.ncols() == 0 || q.ncols() == 0 {
        return Err(MetricsError::EmptyBasis);
    }
    if p.nrows() != q.nrows() {
        return Err(MetricsError::AmbientMismatch(p.nrows(), q.nrows()));
    }
    let (po, _) = qr_positive(p)?;
    let (qo, _) = qr_positive(q)?;
    let product = po.transpose() * qo;
    let svd = product.svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).acos().to_degrees())
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).expect("angles are finite"));
    Ok(angles)
}

/// Orthonormal basis of a Haar-distributed k-dimensional subspace of R^d
/// (positive-diagonal QR of a d x k standard Gaussian matrix).
pub fn random_orthonormal_subspace(d: usize, k: usize, seed: u64) -> Result<DMatrix<f64>, MetricsError> {
    if k == 0 || k > d {
        return Err(MetricsError::SubspaceDim { k, m: d });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let (q, _) = qr_positive(&g)?;
    Ok(q)
}

/// Percentile by linear interpolation between order statistics
/// (`h = (n-1) p`, interpolate between floor(h) and floor(h)+1).
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

/// Median and quartiles of a nonempty series.
pub fn summarize(series: &AngleSeries) -> Result<AngleSummary, MetricsError> {
    if series.values_deg.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let mut sorted = series.values_deg.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("angles are finite"));
    Ok(AngleSummary {
        median: percentile(&sorted, 0.5),
        p25: percentile(&sorted, 0.25),
        p75: percentile(&sorted, 0.75),
    })
}

/// Leading-k-column BLV frame at window sample `j`: the approximate
/// backward Oseledets subspace of dimension k.
pub fn subspace_from_blvs(
    lyap: &LyapunovSet,
    j: usize,
    k: usize,
) -> Result<DMatrix<f64>, MetricsError> {
    let m = lyap.num_vectors();
    if k == 0 || k > m {
        return Err(MetricsError::SubspaceDim { k, m });
    }
    Ok(lyap.blvs[j].columns(0, k).clone_owned())
}
