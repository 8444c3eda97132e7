//! The Ginelli dynamic algorithm: a forward QR sweep along a stored
//! trajectory producing backward Lyapunov vectors and triangular growth
//! factors, a backward triangular sweep producing upper-triangular
//! coefficient matrices, and the assembly of covariant Lyapunov vectors.
//!
//! The trajectory must span three consecutive intervals:
//!
//! ```text
//! [0, I]  forward transient   - converge the QR basis to the BLVs
//! [I, F]  sampling window     - BLVs/CLVs are reported here
//! [F, E]  backward transient  - converge the backward iteration to CLVs
//! ```
//!
//! QR factorizations happen every `l` saved steps; bases are stored on
//! `[I, F]`, growth factors on `(I, E]`.

use nalgebra::DMatrix;

use crate::error::GinelliError;
use crate::linalg::{qr_positive, solve_upper_triangular_upper, triangular_condition_estimate};
use crate::models::Trajectory;
use crate::tangent::propagate_along;

/// Any |R_ii| below this is treated as rank collapse of the QR basis.
const RANK_COLLAPSE_FLOOR: f64 = 1e-300;
/// Per-interval log-growth beyond which the QR interval is too long to keep
/// the growth factors inside comfortable double-precision range.
const LOG_GROWTH_WARN: f64 = 30.0;
/// Condition estimate of a growth factor above which the backward solve is
/// flagged as ill-conditioned.
const CONDITION_WARN: f64 = 1e14;

/// QR cadence of a sweep, in saved trajectory steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GinelliSchedule {
    /// QR interval `l`: saved steps between re-orthonormalizations.
    pub qr_interval: usize,
    /// Number of QR steps in the forward transient `[0, I]`.
    pub n_forward: usize,
    /// Number of QR steps in the sampling window `[I, F]`.
    pub n_sampling: usize,
    /// Number of QR steps in the backward transient `[F, E]`.
    pub n_backward: usize,
    /// Save interval of the trajectory the schedule applies to.
    pub save_interval: f64,
}

impl GinelliSchedule {
    pub fn new(
        qr_interval: usize,
        n_forward: usize,
        n_sampling: usize,
        n_backward: usize,
        save_interval: f64,
    ) -> Result<Self, GinelliError> {
        if qr_interval == 0 {
            return Err(GinelliError::InvalidSchedule("QR interval must be >= 1".into()));
        }
        if n_forward == 0 || n_sampling == 0 || n_backward == 0 {
            return Err(GinelliError::InvalidSchedule(
                "all interval QR counts must be >= 1".into(),
            ));
        }
        if !(save_interval > 0.0) {
            return Err(GinelliError::InvalidSchedule("save interval must be positive".into()));
        }
        Ok(Self {
            qr_interval,
            n_forward,
            n_sampling,
            n_backward,
            save_interval,
        })
    }

    /// Builds a schedule from interval lengths in time units, requiring each
    /// to be an exact multiple of `l * save_interval`.
    pub fn from_times(
        qr_interval: usize,
        save_interval: f64,
        forward_time: f64,
        sampling_time: f64,
        backward_time: f64,
    ) -> Result<Self, GinelliError> {
        let stride = qr_interval as f64 * save_interval;
        let count = |label: &str, t: f64| -> Result<usize, GinelliError> {
            crate::models::exact_multiple(t, stride).ok_or_else(|| {
                GinelliError::InvalidSchedule(format!(
                    "{label} interval {t} is not a multiple of l * save_interval = {stride}"
                ))
            })
        };
        Self::new(
            qr_interval,
            count("forward", forward_time)?,
            count("sampling", sampling_time)?,
            count("backward", backward_time)?,
            save_interval,
        )
    }

    pub fn total_qr_steps(&self) -> usize {
        self.n_forward + self.n_sampling + self.n_backward
    }

    /// Saved samples the trajectory must contain (samples 0..=total*l).
    pub fn required_samples(&self) -> usize {
        self.total_qr_steps() * self.qr_interval + 1
    }

    /// Time between successive QR steps.
    pub fn qr_dt(&self) -> f64 {
        self.qr_interval as f64 * self.save_interval
    }

    /// Saved-step index of QR step `k` (k = 0 is the sweep start).
    pub fn save_index(&self, k: usize) -> usize {
        k * self.qr_interval
    }
}

/// Output of the forward sweep: orthonormal bases on the sampling window and
/// triangular growth factors over `(I, E]`.
#[derive(Debug, Clone)]
pub struct QrHistory {
    pub schedule: GinelliSchedule,
    /// Orthonormal bases `B_j` at QR steps `n_forward ..= n_forward + n_sampling`.
    pub blvs: Vec<DMatrix<f64>>,
    /// Growth factors; entry `i` maps QR step `n_forward + i` to the next one,
    /// covering `(I, E]` (length `n_sampling + n_backward`).
    pub growth_factors: Vec<DMatrix<f64>>,
    /// Largest log growth of any single diagonal entry over one QR interval;
    /// values above ~30 suggest the QR interval is too long.
    pub max_interval_log_growth: f64,
    /// Max acute angle drift (degrees, per column) of the basis over the last
    /// 10% of the forward transient; a convergence diagnostic.
    pub forward_drift_deg: f64,
}

impl QrHistory {
    pub fn num_vectors(&self) -> usize {
        self.blvs[0].ncols()
    }

    /// Saved-sample index of stored basis `i` (0-based within the window).
    pub fn window_save_index(&self, i: usize) -> usize {
        self.schedule.save_index(self.schedule.n_forward + i)
    }
}

/// Per-sample BLV and CLV frames over the sampling window plus the exponent
/// spectrum.
#[derive(Debug, Clone)]
pub struct LyapunovSet {
    pub schedule: GinelliSchedule,
    /// Exponents sorted nonincreasing, units 1/time.
    pub exponents: Vec<f64>,
    /// Orthonormal BLV frames on the sampling window.
    pub blvs: Vec<DMatrix<f64>>,
    /// Upper-triangular coefficient matrices with unit-norm columns.
    pub coefficients: Vec<DMatrix<f64>>,
    /// CLV frames `C_j = B_j U_j`, unit-norm columns.
    pub clvs: Vec<DMatrix<f64>>,
}

impl LyapunovSet {
    pub fn num_samples(&self) -> usize {
        self.blvs.len()
    }

    pub fn num_vectors(&self) -> usize {
        self.exponents.len()
    }

    pub fn dim(&self) -> usize {
        self.blvs[0].nrows()
    }

    /// Saved-sample index (into the underlying trajectory) of window entry `i`.
    pub fn window_save_index(&self, i: usize) -> usize {
        self.schedule.save_index(self.schedule.n_forward + i)
    }
}

/// Default initial perturbation block: the first `m` standard basis vectors.
pub fn standard_basis_block(dim: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, m, |r, c| if r == c { 1.0 } else { 0.0 })
}

/// Forward QR sweep along a stored trajectory.
///
/// Alternates tangent propagation over `l` saved steps (re-initializing the
/// base state from the stored sample at every save time) with a
/// positive-diagonal QR factorization. Bases are stored on the sampling
/// window, growth factors from the end of the forward transient onward, and
/// exponents are accumulated over `(I, E]`:
///
/// ```text
/// lambda_i = sum_j log (R_j)_ii / ((n_sampling + n_backward) * l * dt)
/// ```
pub fn forward_sweep(
    traj: &Trajectory,
    b0: &DMatrix<f64>,
    schedule: &GinelliSchedule,
) -> Result<(QrHistory, Vec<f64>), GinelliError> {
    if traj.len() < schedule.required_samples() {
        return Err(GinelliError::TrajectoryTooShort {
            needed: schedule.required_samples(),
            got: traj.len(),
        });
    }
    if (traj.save_interval - schedule.save_interval).abs()
        > 1e-9 * schedule.save_interval.max(1.0)
    {
        return Err(GinelliError::InvalidSchedule(format!(
            "schedule save interval {} does not match trajectory save interval {}",
            schedule.save_interval, traj.save_interval
        )));
    }
    let m = b0.ncols();
    let l = schedule.qr_interval;
    let total = schedule.total_qr_steps();
    let mut basis = b0.clone();
    let mut blvs = Vec::with_capacity(schedule.n_sampling + 1);
    let mut growth_factors = Vec::with_capacity(schedule.n_sampling + schedule.n_backward);
    let mut log_sums = vec![0.0f64; m];
    let mut max_log_growth = 0.0f64;

    // Basis snapshots over the last 10% of the forward transient, for the
    // convergence diagnostic.
    let drift_start = schedule.n_forward - (schedule.n_forward / 10).max(1);
    let mut drift_reference: Option<DMatrix<f64>> = None;
    let mut forward_drift_deg = 0.0f64;

    for k in 0..total {
        let start = schedule.save_index(k);
        let propagated = propagate_along(traj, start, l, &basis)?;
        let (q, r) = qr_positive(&propagated)?;
        for i in 0..m {
            let d = r[(i, i)];
            if d.abs() < RANK_COLLAPSE_FLOOR {
                return Err(GinelliError::RankCollapse {
                    step: k + 1,
                    index: i,
                    value: d,
                });
            }
            max_log_growth = max_log_growth.max(d.ln().abs());
        }
        basis = q;

        let step = k + 1; // QR step index of the basis we just produced
        if step > schedule.n_forward {
            for i in 0..m {
                log_sums[i] += r[(i, i)].ln();
            }
            growth_factors.push(r);
        }
        if step >= schedule.n_forward && step <= schedule.n_forward + schedule.n_sampling {
            blvs.push(basis.clone());
        }
        if step >= drift_start && step < schedule.n_forward {
            if let Some(reference) = &drift_reference {
                for i in 0..m {
                    let dot = basis.column(i).dot(&reference.column(i)).abs().min(1.0);
                    forward_drift_deg = forward_drift_deg.max(dot.acos().to_degrees());
                }
            }
            drift_reference = Some(basis.clone());
        }
    }

    if max_log_growth > LOG_GROWTH_WARN {
        log::warn!(
            "QR interval may be too long: max per-interval |log growth| = {max_log_growth:.1}"
        );
    }

    let horizon =
        (schedule.n_sampling + schedule.n_backward) as f64 * schedule.qr_dt();
    let exponents: Vec<f64> = log_sums.iter().map(|s| s / horizon).collect();

    Ok((
        QrHistory {
            schedule: *schedule,
            blvs,
            growth_factors,
            max_interval_log_growth: max_log_growth,
            forward_drift_deg,
        },
        exponents,
    ))
}

/// Generic upper-triangular full-rank seed for the backward sweep:
/// strictly-upper entries standard normal, diagonal |standard normal| + 0.1.
pub fn random_upper_triangular<R: rand::Rng>(m: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut u = DMatrix::<f64>::zeros(m, m);
    for c in 0..m {
        for r in 0..=c {
            let v: f64 = StandardNormal.sample(rng);
            u[(r, c)] = if r == c { v.abs() + 0.1 } else { v };
        }
    }
    u
}

/// Backward triangular sweep.
///
/// Starting from a generic upper-triangular full-rank seed at the end of the
/// backward transient, iterates
///
/// ```text
/// U~_j = R_j^{-1} U_{j+1}      (back-substitution, never forming R^{-1})
/// U_j  = U~_j D^{-1},  D_ii = ||U~_j column i||
/// ```
///
/// down through the backward transient and the sampling window, returning
/// the coefficient matrices on the sampling window (index-aligned with the
/// stored BLVs).
pub fn backward_sweep(
    history: &QrHistory,
    u_end: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>, GinelliError> {
    let m = history.num_vectors();
    if u_end.nrows() != m || u_end.ncols() != m {
        return Err(GinelliError::MisalignedSequences {
            blvs: m,
            coeffs: u_end.nrows(),
        });
    }
    if crate::linalg::lower_triangle_max(u_end) != 0.0 {
        return Err(GinelliError::InvalidSchedule(
            "backward seed must be upper triangular".into(),
        ));
    }
    for i in 0..m {
        if u_end[(i, i)] == 0.0 {
            return Err(GinelliError::ZeroColumn { col: i });
        }
    }

    let n_window = history.blvs.len(); // n_sampling + 1
    let mut u = u_end.clone();
    let mut coefficients = vec![DMatrix::<f64>::zeros(m, m); n_window];
    let mut warned_condition = false;

    // growth_factors[i] maps window step i to i+1 (i counted from the start
    // of the sampling window); iterate backwards from the last factor.
    for i in (0..history.growth_factors.len()).rev() {
        let r = &history.growth_factors[i];
        let cond = triangular_condition_estimate(r);
        if cond > CONDITION_WARN && !warned_condition {
            log::warn!("ill-conditioned growth factor (cond ~ {cond:.2e}) in backward sweep");
            warned_condition = true;
        }
        let mut solved = solve_upper_triangular_upper(r, &u)?;
        for c in 0..m {
            let norm = solved.column(c).norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(GinelliError::ZeroColumn { col: c });
            }
            for rr in 0..=c {
                solved[(rr, c)] /= norm;
            }
        }
        u = solved;
        if i < n_window {
            coefficients[i] = u.clone();
        }
    }

    Ok(coefficients)
}

/// Combines stored BLVs with coefficient matrices into CLV frames
/// `C_j = B_j U_j` and packages the exponents. Each CLV column is sign-fixed
/// so its largest-magnitude component is positive, which makes outputs
/// reproducible; angle metrics are sign-blind anyway.
pub fn assemble_clvs(
    history: &QrHistory,
    coefficients: Vec<DMatrix<f64>>,
    exponents: Vec<f64>,
) -> Result<LyapunovSet, GinelliError> {
    if coefficients.len() != history.blvs.len() {
        return Err(GinelliError::MisalignedSequences {
            blvs: history.blvs.len(),
            coeffs: coefficients.len(),
        });
    }
    let m = history.num_vectors();
    let mut coefficients = coefficients;
    let mut clvs = Vec::with_capacity(coefficients.len());
    for (b, u) in history.blvs.iter().zip(coefficients.iter_mut()) {
        let mut c = b * &*u;
        for col in 0..m {
            let mut imax = 0;
            let mut vmax = 0.0f64;
            for row in 0..c.nrows() {
                let a = c[(row, col)].abs();
                if a > vmax {
                    vmax = a;
                    imax = row;
                }
            }
            if c[(imax, col)] < 0.0 {
                for row in 0..c.nrows() {
                    c[(row, col)] = -c[(row, col)];
                }
                for row in 0..=col {
                    u[(row, col)] = -u[(row, col)];
                }
            }
        }
        clvs.push(c);
    }
    Ok(LyapunovSet {
        schedule: history.schedule,
        exponents,
        blvs: history.blvs.clone(),
        coefficients,
        clvs,
    })
}

/// Runs the full pipeline (forward sweep, backward sweep from the given
/// seed, CLV assembly) on a stored trajectory.
pub fn compute_lyapunov_set(
    traj: &Trajectory,
    b0: &DMatrix<f64>,
    u_seed: &DMatrix<f64>,
    schedule: &GinelliSchedule,
) -> Result<LyapunovSet, GinelliError> {
    let (history, exponents) = forward_sweep(traj, b0, schedule)?;
    let coefficients = backward_sweep(&history, u_seed)?;
    assemble_clvs(&history, coefficients, exponents)
}

/// Empirical finite-time growth rate of each CLV column under the tangent
/// flow over the sampling window, computed from the stored growth factors:
/// the propagator acts on `C_j = B_j U_j` as `B R U_j`, so the per-interval
/// growth of column i is `||R_{j+1} U_j e_i||`.
pub fn clv_growth_rates(history: &QrHistory, lyap: &LyapunovSet) -> Result<Vec<f64>, GinelliError> {
    let m = lyap.num_vectors();
    let n = lyap.num_samples();
    if history.blvs.len() != n {
        return Err(GinelliError::MisalignedSequences {
            blvs: history.blvs.len(),
            coeffs: n,
        });
    }
    let mut sums = vec![0.0f64; m];
    for j in 0..n - 1 {
        let r = &history.growth_factors[j];
        let grown = r * &lyap.coefficients[j];
        for i in 0..m {
            sums[i] += grown.column(i).norm().ln();
        }
    }
    let horizon = (n - 1) as f64 * lyap.schedule.qr_dt();
    Ok(sums.iter().map(|s| s / horizon).collect())
}

/// Kaplan-Yorke dimension from a nonincreasing exponent spectrum:
/// `D = j + (sum of the first j exponents) / |lambda_{j+1}|` with `j` the
/// largest index whose cumulative sum is nonnegative. An all-negative
/// spectrum has dimension 0; a spectrum whose cumulative sum never becomes
/// negative is rejected as non-dissipative.
pub fn kaplan_yorke(exponents: &[f64]) -> Result<f64, GinelliError> {
    if exponents.windows(2).any(|w| w[0] < w[1]) {
        return Err(GinelliError::UnsortedExponents);
    }
    if exponents.is_empty() || exponents[0] < 0.0 {
        return Ok(0.0);
    }
    let mut cumulative = 0.0f64;
    let mut j = None;
    let mut sum_j = 0.0f64;
    for (i, &lam) in exponents.iter().enumerate() {
        cumulative += lam;
        if cumulative >= 0.0 {
            j = Some(i);
            sum_j = cumulative;
        }
    }
    match j {
        Some(j) if j + 1 < exponents.len() => {
            Ok((j + 1) as f64 + sum_j / exponents[j + 1].abs())
        }
        _ => Err(GinelliError::NotDissipative),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn kaplan_yorke_direct_formula() {
        let d = kaplan_yorke(&[1.0, 0.0, -2.0]).unwrap();
        assert!((d - 2.5).abs() < 1e-15);
    }

    #[test]
    fn kaplan_yorke_all_negative_is_zero() {
        assert_eq!(kaplan_yorke(&[-1.0, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn kaplan_yorke_rejects_non_dissipative() {
        assert!(matches!(
            kaplan_yorke(&[1.0, 0.5]),
            Err(GinelliError::NotDissipative)
        ));
        assert!(matches!(
            kaplan_yorke(&[0.5, 1.0]),
            Err(GinelliError::UnsortedExponents)
        ));
    }

    #[test]
    fn schedule_arithmetic() {
        let s = GinelliSchedule::from_times(5, 0.05, 400.0, 200.0, 400.0).unwrap();
        assert_eq!(s.n_forward, 1600);
        assert_eq!(s.n_sampling, 800);
        assert_eq!(s.n_backward, 1600);
        assert_eq!(s.required_samples(), 4000 * 5 + 1);
        assert!(GinelliSchedule::from_times(5, 0.05, 400.1, 200.0, 400.0).is_err());
        assert!(GinelliSchedule::new(0, 1, 1, 1, 0.05).is_err());
    }

    #[test]
    fn random_upper_triangular_seed_shape() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let u = random_upper_triangular(5, &mut rng);
        assert_eq!(crate::linalg::lower_triangle_max(&u), 0.0);
        for i in 0..5 {
            assert!(u[(i, i)] >= 0.1);
        }
    }

    #[test]
    fn backward_sweep_rejects_bad_seeds() {
        let schedule = GinelliSchedule::new(1, 1, 1, 1, 0.01).unwrap();
        let history = QrHistory {
            schedule,
            blvs: vec![DMatrix::identity(3, 3); 2],
            growth_factors: vec![DMatrix::identity(3, 3); 2],
            max_interval_log_growth: 0.0,
            forward_drift_deg: 0.0,
        };
        let mut seed = DMatrix::identity(3, 3);
        seed[(2, 0)] = 1.0;
        assert!(backward_sweep(&history, &seed).is_err());
        let mut seed = DMatrix::identity(3, 3);
        seed[(1, 1)] = 0.0;
        assert!(matches!(
            backward_sweep(&history, &seed),
            Err(GinelliError::ZeroColumn { col: 1 })
        ));
    }

    #[test]
    fn identity_coefficients_make_clvs_equal_blvs() {
        let schedule = GinelliSchedule::new(1, 1, 1, 1, 0.01).unwrap();
        let (q, _) = qr_positive(&DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 0.3, -0.2, 1.1, 0.5, 0.7],
        ))
        .unwrap();
        let history = QrHistory {
            schedule,
            blvs: vec![q.clone(), q.clone()],
            growth_factors: vec![DMatrix::identity(2, 2); 2],
            max_interval_log_growth: 0.0,
            forward_drift_deg: 0.0,
        };
        let lyap = assemble_clvs(
            &history,
            vec![DMatrix::identity(2, 2); 2],
            vec![0.1, -0.1],
        )
        .unwrap();
        for (c, b) in lyap.clvs.iter().zip(history.blvs.iter()) {
            // sign fixing may flip columns; compare up to sign
            for col in 0..2 {
                let dot = c.column(col).dot(&b.column(col)).abs();
                assert!((dot - 1.0).abs() < 1e-14);
            }
        }
    }
}
