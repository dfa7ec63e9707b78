//! Root-mean-square statistics and RMS normalization.

use crate::error::{Error, Result};
use crate::Matrix;

/// Root-mean-square of `x` with the stabilizer folded in:
/// `sqrt(mean(x_i^2) + eps)`.
///
/// `eps` sits inside the square root next to the mean square, which is the
/// convention the sliced-norm corrections in the sharded decoder assume.
pub fn rms(x: &[f64], eps: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::arg("rms", "empty vector".to_string()));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::arg("rms", format!("eps must be >= 0, got {eps}")));
    }
    Ok(rms_unchecked(x, eps))
}

/// Same as [`rms`] without argument validation, for use in inner loops that
/// have already checked shapes.
#[inline]
pub(crate) fn rms_unchecked(x: &[f64], eps: f64) -> f64 {
    let mut sumsq = 0.0;
    for v in x {
        sumsq += v * v;
    }
    (sumsq / x.len() as f64 + eps).sqrt()
}

/// Row-wise RMS normalization with a learned gain:
/// `out[r][c] = gamma[c] * x[r][c] / rms(x[r])`.
pub fn rmsnorm(gamma: &[f64], x: &Matrix, eps: f64) -> Result<Matrix> {
    if gamma.len() != x.cols() {
        return Err(Error::shape(
            "rmsnorm",
            format!("gamma has {} entries, matrix has {} columns", gamma.len(), x.cols()),
        ));
    }
    if x.cols() == 0 {
        return Err(Error::arg("rmsnorm", "zero-width matrix".to_string()));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::arg("rmsnorm", format!("eps must be >= 0, got {eps}")));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let denom = rms_unchecked(row, eps);
        let dst = out.row_mut(r);
        for c in 0..row.len() {
            dst[c] = gamma[c] * row[c] / denom;
        }
    }
    Ok(out)
}
