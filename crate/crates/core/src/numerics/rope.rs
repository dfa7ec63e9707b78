//! Rotary position encoding applied to row vectors.

use crate::error::{Error, Result};
use crate::Matrix;

/// Base of the geometric frequency schedule.
const ROPE_BASE: f64 = 10_000.0;

/// Applies rotary position encoding to each row of `x`.
///
/// Columns are consumed as consecutive pairs `(2i, 2i+1)`; pair `i` of the
/// row at position `p` is rotated by angle `p * base^(-2i/d)` where `d` is
/// the column count. Each rotation is orthogonal, so pair norms (and hence
/// row norms) are preserved, and the dot product of two encoded rows depends
/// on their positions only through the difference.
pub fn rope_apply(x: &Matrix, positions: &[usize]) -> Result<Matrix> {
    if !x.cols().is_multiple_of(2) {
        return Err(Error::arg(
            "rope_apply",
            format!("column count {} is odd; rotary pairs need an even width", x.cols()),
        ));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape(
            "rope_apply",
            format!("{} positions for {} rows", positions.len(), x.rows()),
        ));
    }
    let d = x.cols();
    let freqs: Vec<f64> = (0..d / 2)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / d as f64))
        .collect();
    let mut out = Matrix::zeros(x.rows(), d);
    for (r, &position) in positions.iter().enumerate() {
        let p = position as f64;
        let src = x.row(r);
        let dst = out.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let angle = p * f;
            let (sin, cos) = angle.sin_cos();
            let a = src[2 * i];
            let b = src[2 * i + 1];
            dst[2 * i] = a * cos - b * sin;
            dst[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(out)
}
