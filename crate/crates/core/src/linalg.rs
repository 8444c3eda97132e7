//! Dense linear-algebra helpers shared by the sweeps and metrics.

use nalgebra::DMatrix;

use crate::error::LinalgError;

/// Thin QR factorization with the positive-diagonal convention.
///
/// Returns `(q, r)` with `a = q r`, `q` of shape `d x m` with orthonormal
/// columns and `r` upper triangular `m x m` with strictly positive diagonal.
/// This convention makes the factorization of a full-column-rank matrix
/// unique, so repeated runs produce identical bases.
pub fn qr_positive(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), LinalgError> {
    let (rows, cols) = a.shape();
    if rows < cols || cols == 0 {
        return Err(LinalgError::Shape {
            expected: "d x m with 1 <= m <= d".into(),
            rows,
            cols,
        });
    }
    let (mut q, mut r) = a.clone().qr().unpack();
    for i in 0..cols {
        let d = r[(i, i)];
        if d == 0.0 || !d.is_finite() {
            return Err(LinalgError::RankDeficient { col: i });
        }
        if d < 0.0 {
            // Flip the sign of row i of R and column i of Q; the product QR
            // is unchanged.
            for j in i..cols {
                r[(i, j)] = -r[(i, j)];
            }
            for k in 0..rows {
                q[(k, i)] = -q[(k, i)];
            }
        }
    }
    Ok((q, r))
}

/// Back-substitution solve of `r x = b` for a single column.
///
/// `r` must be upper triangular with nonzero diagonal. Only entries
/// `0..=last` of `b` are read and only those of `x` are written; callers
/// passing an upper-triangular right-hand side use this to skip the
/// structural zeros below the diagonal.
fn back_substitute_column(r: &DMatrix<f64>, b: &[f64], x: &mut [f64], last: usize) {
    for i in (0..=last).rev() {
        let mut s = b[i];
        for j in (i + 1)..=last {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
}

/// Solves `r x = u` where both `r` and `u` are upper triangular `m x m`.
///
/// The solution is upper triangular as well: column `i` of `u` has support
/// in rows `0..=i`, and back-substitution never propagates below that, so
/// the zero fill-in below the diagonal is exact (not merely small).
pub fn solve_upper_triangular_upper(
    r: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    let m = r.nrows();
    if r.ncols() != m || u.nrows() != m || u.ncols() != m {
        return Err(LinalgError::Shape {
            expected: format!("square {m} x {m} factors"),
            rows: u.nrows(),
            cols: u.ncols(),
        });
    }
    for i in 0..m {
        if r[(i, i)] == 0.0 {
            return Err(LinalgError::RankDeficient { col: i });
        }
    }
    let mut out = DMatrix::<f64>::zeros(m, m);
    let mut col = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for c in 0..m {
        for i in 0..=c {
            rhs[i] = u[(i, c)];
        }
        back_substitute_column(r, &rhs, &mut col, c);
        for i in 0..=c {
            out[(i, c)] = col[i];
        }
    }
    Ok(out)
}

/// Cheap condition estimate of an upper-triangular matrix from its diagonal.
pub fn triangular_condition_estimate(r: &DMatrix<f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..r.nrows().min(r.ncols()) {
        let d = r[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Max-norm of `qᵀq - I`, the departure of `q` from orthonormal columns.
pub fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let m = q.ncols();
    let g = q.transpose() * q;
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Max-norm of the strictly lower triangle (exact-zero check).
pub fn lower_triangle_max(u: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..u.ncols() {
        for r in (c + 1)..u.nrows() {
            worst = worst.max(u[(r, c)].abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_factors_to_identity() {
        let a = DMatrix::<f64>::identity(4, 4);
        let (q, r) = qr_positive(&a).unwrap();
        assert!((q - DMatrix::identity(4, 4)).amax() < 1e-14);
        assert!((r - DMatrix::identity(4, 4)).amax() < 1e-14);
    }

    #[test]
    fn negative_leading_column_keeps_r_positive() {
        // First column (-2, 0, 0): R_11 = ||a_1|| = 2 forces Q_1 = a_1 / 2,
        // i.e. the sign convention constrains R, not Q.
        let a = DMatrix::from_column_slice(3, 1, &[-2.0, 0.0, 0.0]);
        let (q, r) = qr_positive(&a).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((q[(0, 0)] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_is_detected() {
        // An exactly-zero column survives the orthogonal transforms exactly,
        // so the zero pivot is detected; near-zero pivots from numerically
        // dependent columns are left to the caller's own thresholds.
        let mut a = random_matrix(5, 3, 7);
        a.set_column(2, &DVector::zeros(5));
        match qr_positive(&a) {
            Err(LinalgError::RankDeficient { .. }) => {}
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn triangular_solve_matches_dense_solve() {
        let a = random_matrix(6, 6, 11);
        let (_, r) = qr_positive(&a).unwrap();
        let mut u = random_matrix(6, 6, 13);
        for c in 0..6 {
            for i in (c + 1)..6 {
                u[(i, c)] = 0.0;
            }
        }
        let x = solve_upper_triangular_upper(&r, &u).unwrap();
        assert!((&r * &x - &u).amax() < 1e-10);
        assert_eq!(lower_triangle_max(&x), 0.0);
    }

    #[test]
    fn back_substitution_solves_full_rhs() {
        let a = random_matrix(5, 5, 3);
        let (_, r) = qr_positive(&a).unwrap();
        let b = random_matrix(5, 1, 5);
        let mut x = vec![0.0; 5];
        back_substitute_column(&r, b.as_slice(), &mut x, 4);
        let res = &r * DVector::from_column_slice(&x) - &b;
        assert!(res.amax() < 1e-12);
    }

    proptest! {
        // Reconstruction, orthonormality, and the sign convention on random
        // full-rank matrices.
        #[test]
        fn qr_reconstructs(seed in 0u64..500) {
            let a = random_matrix(5, 3, seed);
            let (q, r) = qr_positive(&a).unwrap();
            prop_assert!((&q * &r - &a).amax() < 1e-12);
            prop_assert!(orthonormality_error(&q) < 1e-12);
            for i in 0..3 {
                prop_assert!(r[(i, i)] > 0.0);
            }
            prop_assert_eq!(lower_triangle_max(&r), 0.0);
        }
    }
}
