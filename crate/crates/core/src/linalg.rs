//! Small dense helpers shared by the metric, dual solver and diagnostics.

use crate::{Matrix, Vector};

/// Largest singular value of `a` by power iteration on `AᵀA` (or `AAᵀ` when
/// that is smaller), stopped at relative change `rel_tol`.
pub fn spectral_norm(a: &Matrix, rel_tol: f64) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let wide = a.nrows() < a.ncols();
    let n = if wide { a.nrows() } else { a.ncols() };
    // Deterministic, not orthogonal to the leading vector for generic data.
    let mut v = Vector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_7).fract());
    v /= v.norm();
    let mut lambda = 0.0_f64;
    for _ in 0..10_000 {
        let w = if wide {
            a * (a.transpose() * &v)
        } else {
            a.transpose() * (a * &v)
        };
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / next;
        if (next - lambda).abs() <= rel_tol * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn max_eigenvalue_psd(s: &Matrix, rel_tol: f64) -> f64 {
    let n = s.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Vector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_7).fract());
    v /= v.norm();
    let mut lambda = 0.0_f64;
    for _ in 0..10_000 {
        let w = s * &v;
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w / next;
        if (next - lambda).abs() <= rel_tol * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// `Aᵀy` written into a fresh vector; thin wrapper kept for readability at
/// call sites that mix row and column views.
#[inline]
pub fn at_mul(a: &Matrix, y: &Vector) -> Vector {
    a.tr_mul(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, -5.0, 1.0]));
        assert!((spectral_norm(&a, 1e-14) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn spectral_norm_wide_matches_svd() {
        let a = Matrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 3.0, 1.0]);
        let svd = a.clone().svd(false, false);
        let top = svd.singular_values.max();
        assert!((spectral_norm(&a, 1e-15) - top).abs() < 1e-6 * top);
    }
}
