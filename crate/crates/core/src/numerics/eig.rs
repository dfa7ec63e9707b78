//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Jacobi is slow compared to Householder tridiagonalization but is simple,
//! robust, and — important here — deterministic: the sweep order is fixed,
//! so the same input yields the same rotation sequence and the same bits.
//! Matrices in this crate are small (latent widths of a few hundred at
//! most), where Jacobi is entirely adequate.

use crate::error::{Error, Result};
use crate::Matrix;

/// Convergence threshold on the relative off-diagonal Frobenius mass.
const OFF_DIAG_TOL: f64 = 1e-12;

/// Hard cap on full sweeps before giving up.
const MAX_SWEEPS: usize = 100;

/// Threshold below which an eigenvector entry is treated as zero when fixing
/// the sign convention.
const SIGN_EPS: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix.
///
/// Returns `(eigenvalues, v)` with eigenvalues sorted in descending order
/// and the columns of `v` holding the matching orthonormal eigenvectors so
/// that `s = v * diag(eigenvalues) * v^T`. Each eigenvector is sign-fixed:
/// its first entry larger than `1e-12` in magnitude is made nonnegative.
///
/// `sym_tol` bounds the accepted asymmetry: the check is
/// `max |s_ij - s_ji| <= sym_tol * max(1, max |s_ij|)`. The input is then
/// symmetrized (averaged with its transpose) before iteration so tiny
/// round-off asymmetry cannot steer the rotations.
pub fn symmetric_eig(s: &Matrix, sym_tol: f64) -> Result<(Vec<f64>, Matrix)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::shape(
            "symmetric_eig",
            format!("matrix is {}x{}, expected square", s.rows(), s.cols()),
        ));
    }
    if n == 0 {
        return Err(Error::arg("symmetric_eig", "empty matrix".to_string()));
    }
    let scale = s.max_abs().max(1.0);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if max_asym > sym_tol * scale {
        return Err(Error::NotSymmetric {
            max_asym,
            tol: sym_tol * scale,
        });
    }

    // Work on the symmetrized copy.
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (s.get(i, j) + s.get(j, i)));
        }
    }
    let mut v = Matrix::identity(n);

    let norm = a.frobenius().max(1.0);
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut off_sq = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                off_sq += 2.0 * apq * apq;
            }
        }
        if off_sq.sqrt() <= OFF_DIAG_TOL * norm {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                // Classic Jacobi rotation choosing the smaller angle root.
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;

                let app = a.get(p, p);
                let aqq = a.get(q, q);
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a.get(i, p);
                        let aiq = a.get(i, q);
                        a.set(i, p, c * aip - sn * aiq);
                        a.set(p, i, c * aip - sn * aiq);
                        a.set(i, q, sn * aip + c * aiq);
                        a.set(q, i, sn * aip + c * aiq);
                    }
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - sn * viq);
                    v.set(i, q, sn * vip + c * viq);
                }
            }
        }
    }
    if !converged {
        // One more measurement after the final sweep; the loop above only
        // tests at sweep entry.
        let mut off_sq = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                off_sq += 2.0 * apq * apq;
            }
        }
        if off_sq.sqrt() > OFF_DIAG_TOL * norm {
            return Err(Error::ConvergenceFailure {
                op: "symmetric_eig",
                detail: format!(
                    "off-diagonal norm {:e} after {MAX_SWEEPS} sweeps (target {:e})",
                    off_sq.sqrt(),
                    OFF_DIAG_TOL * norm
                ),
            });
        }
    }

    // Sort eigenpairs by eigenvalue, descending. The sort is stable so ties
    // keep their sweep order and stay deterministic.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut sorted_v = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            sorted_v.set(i, dst, v.get(i, src));
        }
    }

    // Sign convention: first entry of each column with magnitude above
    // SIGN_EPS is made nonnegative.
    for j in 0..n {
        let mut flip = false;
        for i in 0..n {
            let e = sorted_v.get(i, j);
            if e.abs() > SIGN_EPS {
                flip = e < 0.0;
                break;
            }
        }
        if flip {
            for i in 0..n {
                let e = sorted_v.get(i, j);
                sorted_v.set(i, j, -e);
            }
        }
    }

    Ok((eigenvalues, sorted_v))
}

/// Largest deviation of `v^T v` from the identity; zero for a perfectly
/// orthonormal column set.
pub fn orthonormality_error(v: &Matrix) -> f64 {
    let gram = v
        .transpose()
        .matmul(v)
        .expect("square matrix multiplies with itself");
    let mut worst = 0.0f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}
