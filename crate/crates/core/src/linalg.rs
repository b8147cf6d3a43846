//! Small dense helpers for the `N x N` algebra (N <= 8).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative pivot threshold of the Cholesky condition guard.
pub const PIVOT_GUARD: f64 = 1e-12;

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Cholesky factorization with the condition guard.
///
/// The guard is applied to the diagonally equilibrated matrix
/// `D^-1/2 M D^-1/2` (unit trace per row, so `trace / N = 1`): every ratio
/// `L_ii^2 / M_ii` must be at least `PIVOT_GUARD`. The augmented covariances
/// are strongly graded near `t = 1`, so unscaled pivots would flag scale
/// disparity rather than near-dependence.
pub fn guarded_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: m.ncols(),
        });
    }
    let chol = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    for i in 0..n {
        let pivot = l[(i, i)] * l[(i, i)] / m[(i, i)];
        if !(pivot >= PIVOT_GUARD) {
            return Err(Error::NearSingular {
                pivot,
                threshold: PIVOT_GUARD,
            });
        }
    }
    Ok(chol)
}

/// Lower-triangular `L` with positive diagonal and `L L^T = B B^T`, computed
/// from the square-root factor `B` by a QR of `B^T` (never forms `B B^T`).
pub fn cholesky_from_factor(b: &DMatrix<f64>) -> DMatrix<f64> {
    let r = b.transpose().qr().r();
    let mut l = r.transpose();
    for j in 0..l.ncols() {
        if l[(j, j)] < 0.0 {
            let mut col = l.column_mut(j);
            col.neg_mut();
        }
    }
    l
}

/// [`cholesky_from_factor`] with the same equilibrated pivot guard as
/// [`guarded_cholesky`] (`M_ii` is the squared row norm of `B`).
pub fn guarded_factor(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let l = cholesky_from_factor(b);
    for i in 0..l.nrows() {
        let pivot = l[(i, i)] * l[(i, i)] / b.row(i).norm_squared();
        if !(pivot >= PIVOT_GUARD) {
            return Err(Error::NearSingular {
                pivot,
                threshold: PIVOT_GUARD,
            });
        }
    }
    Ok(l)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest entrywise asymmetry relative to the largest entry.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() / scale
}

pub fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

/// `max |a - b| / max(|b|)`, the norm-relative error used by the identity checks.
pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorials() {
        assert_eq!(factorial(0), 1.0);
        assert_eq!(factorial(1), 1.0);
        assert_eq!(factorial(5), 120.0);
        assert_eq!(factorial(8), 40320.0);
    }

    #[test]
    fn guard_rejects_near_dependence_not_scale() {
        // wildly different scales are fine
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-20]));
        assert!(guarded_cholesky(&m).is_ok());
        // correlation 1 - 1e-14 is not
        let c = 1.0 - 1e-14;
        let m = DMatrix::from_row_slice(2, 2, &[1.0, c, c, 1.0]);
        assert!(matches!(
            guarded_cholesky(&m),
            Err(Error::NearSingular { .. })
        ));
        let c = 1.0 - 1e-6;
        let m = DMatrix::from_row_slice(2, 2, &[1.0, c, c, 1.0]);
        assert!(guarded_cholesky(&m).is_ok());
    }

    #[test]
    fn cholesky_from_factor_matches_direct() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.5, 2.0, 0.1, -1.0, 0.3, 0.7]);
        let s = &b * b.transpose();
        let direct = Cholesky::new(s).unwrap().l();
        let via = cholesky_from_factor(&b);
        assert!((direct - via).amax() < 1e-14);
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            guarded_cholesky(&m).unwrap_err(),
            Error::NotPositiveDefinite
        );
    }
}
