//! Small dense linear-algebra routines used by fusion.

use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`Error::Numerical`] when a pivot is not strictly positive,
/// which is how a singular (or indefinite) system surfaces.
pub fn cholesky_factor<S: Scalar>(m: &Mat<S>) -> Result<Mat<S>> {
    let n = m.rows();
    assert_eq!(m.shape(), (n, n), "cholesky needs a square matrix");
    let mut l = Mat::<S>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= S::zero() || !s.is_finite() {
                    return Err(Error::numerical(format!(
                        "matrix is not positive definite (pivot {s} at row {i}); \
                         the covariance is singular — use a ridge term mu > 0"
                    )));
                }
                l[(i, j)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` given the lower factor `L`; `B` is `n x m`.
pub fn cholesky_solve<S: Scalar>(l: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let n = l.rows();
    assert_eq!(b.rows(), n, "rhs height mismatch");
    let mut x = b.clone();
    // forward: L y = b
    for col in 0..x.cols() {
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[(i, col)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `M X = B` for symmetric positive-definite `M`.
pub fn solve_spd<S: Scalar>(m: &Mat<S>, b: &Mat<S>) -> Result<Mat<S>> {
    let l = cholesky_factor(m)?;
    Ok(cholesky_solve(&l, b))
}
