//! Deterministic dense linear algebra on `f64`.
//!
//! Everything in this module is written so that the same inputs produce the
//! same bits on every run and on every platform with IEEE-754 doubles:
//! accumulations run left to right in a fixed order, there is no libm-
//! dependent fast path, and no operation reads global state. The sharded
//! decode simulation leans on this to compare execution strategies bitwise.

pub mod eig;
pub mod matrix;
pub mod norm;
pub mod rng;
pub mod rope;

pub use eig::symmetric_eig;
pub use matrix::Matrix;
pub use norm::{rms, rmsnorm};
pub use rng::SeededRng;
pub use rope::rope_apply;

/// Numerically stable softmax over `row` in place.
///
/// Entries equal to `f64::NEG_INFINITY` (used for causal masking) get weight
/// exactly zero. The row must contain at least one finite entry; an all
/// `-inf` row has no meaningful distribution and is a caller bug, so it is
/// asserted rather than handled.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        max.is_finite(),
        "softmax over a fully masked row has no distribution"
    );
    let mut sum = 0.0;
    for v in row.iter_mut() {
        if *v == f64::NEG_INFINITY {
            *v = 0.0;
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
