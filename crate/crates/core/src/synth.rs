//! Synthetic models and calibration data with controlled anisotropy.
//!
//! Sliced execution only degrades when latent energy is unevenly spread, so
//! the error-ordering experiments need models whose latent spectrum is known
//! and tunable. Two generators live here:
//!
//! - [`gen_features`] draws calibration rows with a prescribed covariance
//!   spectrum (optionally in a rotated, non-axis-aligned basis);
//! - [`init_anisotropic_weights`] builds a full weight set whose latent
//!   coordinates have geometrically decaying energy, again optionally
//!   rotated so no coordinate split is aligned with the principal axes;
//! - [`gen_ar1_inputs`] draws token sequences whose rows are serially
//!   correlated, the way neighboring hidden states in a real stream are.
//!   With independent rows the partial-logit rescaling has nothing to
//!   latch onto (queries and cached latents are uncorrelated, so the
//!   best multiplier for a partial dot product is 1, not the energy
//!   ratio); correlated rows give the scaled-local softmax its intended
//!   alignment structure.

use std::str::FromStr;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mla::{init_weights, WeightSet};
use crate::reparam::{random_orthogonal, CalibrationSet};
use crate::{Matrix, SeededRng};

/// Prescription for a synthetic feature distribution: a covariance spectrum,
/// a sample count, and an optional random rotation of the eigenbasis.
///
/// Parsed from compact strings like `eigs=4,3,2,1;rows=4096;rotate=7`
/// (rotate takes the seed for the random basis; omit it for axis-aligned
/// features). `rows` defaults to 1024.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSpec {
    pub eigenvalues: Vec<f64>,
    pub rows: usize,
    pub rotate_seed: Option<u64>,
}

impl CovSpec {
    /// Geometric spectrum `lambda_j = ratio^j`, handy for sweeps.
    pub fn geometric(dim: usize, ratio: f64, rows: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("CovSpec::geometric", "zero dim".to_string()));
        }
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::arg(
                "CovSpec::geometric",
                format!("ratio must be positive, got {ratio}"),
            ));
        }
        let eigenvalues = (0..dim).map(|j| ratio.powi(j as i32)).collect();
        Ok(CovSpec {
            eigenvalues,
            rows,
            rotate_seed: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eigenvalues.is_empty() {
            return Err(Error::arg("CovSpec", "empty spectrum".to_string()));
        }
        if self.rows == 0 {
            return Err(Error::arg("CovSpec", "rows must be positive".to_string()));
        }
        for &e in &self.eigenvalues {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::arg(
                    "CovSpec",
                    format!("eigenvalues must be finite and >= 0, got {e}"),
                ));
            }
        }
        if self.eigenvalues.iter().all(|&e| e == 0.0) {
            return Err(Error::arg("CovSpec", "all-zero spectrum".to_string()));
        }
        Ok(())
    }
}

impl FromStr for CovSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut eigenvalues: Option<Vec<f64>> = None;
        let mut rows = 1024usize;
        let mut rotate_seed = None;
        for field in s.split(';').filter(|f| !f.trim().is_empty()) {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                Error::arg("CovSpec::from_str", format!("field '{field}' is not key=value"))
            })?;
            match key.trim() {
                "eigs" => {
                    let parsed: std::result::Result<Vec<f64>, _> =
                        value.split(',').map(|v| v.trim().parse::<f64>()).collect();
                    eigenvalues = Some(parsed.map_err(|e| {
                        Error::arg("CovSpec::from_str", format!("bad eigenvalue list: {e}"))
                    })?);
                }
                "rows" => {
                    rows = value.trim().parse().map_err(|e| {
                        Error::arg("CovSpec::from_str", format!("bad rows: {e}"))
                    })?;
                }
                "rotate" => {
                    rotate_seed = Some(value.trim().parse().map_err(|e| {
                        Error::arg("CovSpec::from_str", format!("bad rotate seed: {e}"))
                    })?);
                }
                other => {
                    return Err(Error::arg(
                        "CovSpec::from_str",
                        format!("unknown field '{other}' (eigs, rows, rotate)"),
                    ));
                }
            }
        }
        let spec = CovSpec {
            eigenvalues: eigenvalues.ok_or_else(|| {
                Error::arg("CovSpec::from_str", "missing eigs=... field".to_string())
            })?,
            rows,
            rotate_seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Draws calibration features with second moment `R diag(eigs) R^T`, where
/// `R` is the identity (axis-aligned) or a seeded random rotation.
pub fn gen_features(spec: &CovSpec, rng: &mut SeededRng) -> Result<CalibrationSet> {
    spec.validate()?;
    let d = spec.dim();
    let mut f = rng.gaussian_matrix(spec.rows, d, 1.0);
    for (j, &e) in spec.eigenvalues.iter().enumerate() {
        let s = e.sqrt();
        for r in 0..spec.rows {
            let row = f.row_mut(r);
            row[j] *= s;
        }
    }
    let f = match spec.rotate_seed {
        Some(seed) => {
            let mut rot_rng = SeededRng::new(seed);
            let r = random_orthogonal(d, &mut rot_rng);
            f.matmul(&r.transpose())?
        }
        None => f,
    };
    CalibrationSet::new(f, format!("synthetic:{spec:?}"))
}

/// Weight set whose latent energy decays geometrically coordinate by
/// coordinate.
///
/// Starts from a standard draw, scales column `j` of the latent
/// down-projection by `decay^j`, and (when `rotate` is set) spins the latent
/// basis with a random orthogonal matrix applied consistently to the
/// down-projection and both expansions — so the model computes the same
/// function but its principal latent directions are hidden from any
/// coordinate-aligned split.
pub fn init_anisotropic_weights(
    cfg: &ModelConfig,
    rng: &mut SeededRng,
    scale: f64,
    decay: f64,
    rotate: bool,
) -> Result<WeightSet> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::arg(
            "init_anisotropic_weights",
            format!("decay must be in (0, 1], got {decay}"),
        ));
    }
    let mut w = init_weights(cfg, rng, scale)?;
    // Compensate the overall energy loss so outputs stay O(1): scale the
    // whole spectrum to keep the mean square column gain at 1.
    let mean_sq: f64 = (0..cfg.latent_dim)
        .map(|j| decay.powi(2 * j as i32))
        .sum::<f64>()
        / cfg.latent_dim as f64;
    let compensation = 1.0 / mean_sq.sqrt();
    for j in 0..cfg.latent_dim {
        w.kv_down.scale_col(j, compensation * decay.powi(j as i32));
    }
    if rotate {
        let r = random_orthogonal(cfg.latent_dim, rng);
        // kv_down * R^T together with R * k_up (and v_up) is an exact
        // reparameterization: the computed function is unchanged.
        w.kv_down = w.kv_down.matmul(&r.transpose())?;
        w.k_up = r.matmul(&w.k_up)?;
        w.v_up = r.matmul(&w.v_up)?;
    }
    Ok(w)
}

/// Token sequence with AR(1) row correlation and unit marginal variance:
/// row 0 is standard Gaussian and row t is `rho * row[t-1] + sqrt(1 - rho^2)
/// * fresh noise`. `rho = 0` reduces to independent rows.
pub fn gen_ar1_inputs(rows: usize, dim: usize, rho: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if rows == 0 || dim == 0 {
        return Err(Error::arg(
            "gen_ar1_inputs",
            format!("rows and dim must be positive, got {rows}x{dim}"),
        ));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::arg(
            "gen_ar1_inputs",
            format!("rho must be in [0, 1), got {rho}"),
        ));
    }
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = Matrix::zeros(0, dim);
    let mut prev: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
    x.push_row(&prev)?;
    for _ in 1..rows {
        let next: Vec<f64> = prev
            .iter()
            .map(|&p| rho * p + innov * rng.next_gaussian())
            .collect();
        x.push_row(&next)?;
        prev = next;
    }
    Ok(x)
}

/// Pre-normalization latents the model produces on random Gaussian inputs;
/// the natural calibration set for PCA on a synthetic model.
pub fn collect_latents(
    cfg: &ModelConfig,
    w: &WeightSet,
    rng: &mut SeededRng,
    rows: usize,
) -> Result<CalibrationSet> {
    if rows == 0 {
        return Err(Error::arg("collect_latents", "rows must be positive".to_string()));
    }
    let x = rng.gaussian_matrix(rows, cfg.hidden_dim, 1.0);
    let latents = x.matmul(&w.kv_down)?;
    CalibrationSet::new(latents, "model-latents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::sqnorm;

    #[test]
    fn covspec_parses_full_form() {
        let spec: CovSpec = "eigs=4,3,2,1;rows=4096;rotate=7".parse().unwrap();
        assert_eq!(spec.eigenvalues, vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(spec.rows, 4096);
        assert_eq!(spec.rotate_seed, Some(7));
    }

    #[test]
    fn covspec_defaults_rows_and_rotation() {
        let spec: CovSpec = "eigs=1,1".parse().unwrap();
        assert_eq!(spec.rows, 1024);
        assert_eq!(spec.rotate_seed, None);
    }

    #[test]
    fn covspec_rejects_garbage() {
        assert!("".parse::<CovSpec>().is_err());
        assert!("rows=10".parse::<CovSpec>().is_err());
        assert!("eigs=1,oops".parse::<CovSpec>().is_err());
        assert!("eigs=1;wat=3".parse::<CovSpec>().is_err());
        assert!("eigs=-1,2".parse::<CovSpec>().is_err());
        assert!("eigs=0,0".parse::<CovSpec>().is_err());
    }

    #[test]
    fn features_match_requested_spectrum() {
        let spec: CovSpec = "eigs=9,4,1,0.25;rows=8192".parse().unwrap();
        let mut rng = SeededRng::new(20);
        let cal = gen_features(&spec, &mut rng).unwrap();
        for (j, &want) in spec.eigenvalues.iter().enumerate() {
            let mut sum = 0.0;
            for r in 0..cal.rows() {
                let v = cal.features().get(r, j);
                sum += v * v;
            }
            let got = sum / cal.rows() as f64;
            assert!((got - want).abs() / want < 0.1, "coord {j}: {got} vs {want}");
        }
    }

    #[test]
    fn rotated_features_preserve_total_energy() {
        let plain: CovSpec = "eigs=9,4,1,0.25;rows=512".parse().unwrap();
        let rotated: CovSpec = "eigs=9,4,1,0.25;rows=512;rotate=3".parse().unwrap();
        let a = gen_features(&plain, &mut SeededRng::new(21)).unwrap();
        let b = gen_features(&rotated, &mut SeededRng::new(21)).unwrap();
        // Same Gaussian draw, orthogonal rotation: row norms match exactly
        // up to round-off.
        for r in 0..a.rows() {
            let na = sqnorm(a.features().row(r));
            let nb = sqnorm(b.features().row(r));
            assert!((na - nb).abs() < 1e-9 * na.max(1.0));
        }
        // But the per-coordinate energy no longer follows the spectrum.
        let mut top = 0.0;
        for r in 0..b.rows() {
            let v = b.features().get(r, 0);
            top += v * v;
        }
        top /= b.rows() as f64;
        assert!((top - 9.0).abs() > 1.0, "rotation left coord 0 untouched: {top}");
    }

    #[test]
    fn anisotropic_weights_decay_latent_energy() {
        let cfg = ModelConfig::toy();
        let mut rng = SeededRng::new(22);
        let w = init_anisotropic_weights(&cfg, &mut rng, 1.0, 0.8, false).unwrap();
        let mut data_rng = SeededRng::new(23);
        let cal = collect_latents(&cfg, &w, &mut data_rng, 2048).unwrap();
        let energy = |j: usize| -> f64 {
            (0..cal.rows())
                .map(|r| {
                    let v = cal.features().get(r, j);
                    v * v
                })
                .sum::<f64>()
                / cal.rows() as f64
        };
        // Energy in the first coordinate dwarfs the last.
        let first = energy(0);
        let last = energy(cfg.latent_dim - 1);
        assert!(
            first / last > 100.0,
            "expected strong decay, got {first} vs {last}"
        );
    }

    #[test]
    fn rotation_hides_the_decay_without_changing_the_function() {
        let cfg = ModelConfig::toy();
        // Same base draw: re-seed so the pre-rotation weights agree.
        let plain = init_anisotropic_weights(&cfg, &mut SeededRng::new(24), 1.0, 0.8, false).unwrap();
        let spun = init_anisotropic_weights(&cfg, &mut SeededRng::new(24), 1.0, 0.8, true).unwrap();
        let mut x_rng = SeededRng::new(25);
        let x = x_rng.gaussian_matrix(4, cfg.hidden_dim, 1.0);
        let (a, _) = crate::mla::mla_prefill(&cfg, &plain, &x).unwrap();
        let (b, _) = crate::mla::mla_prefill(&cfg, &spun, &x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9, "rotation changed outputs");
        assert_ne!(plain.kv_down, spun.kv_down);
    }

    #[test]
    fn anisotropic_rejects_bad_decay() {
        let cfg = ModelConfig::toy();
        let mut rng = SeededRng::new(26);
        assert!(init_anisotropic_weights(&cfg, &mut rng, 1.0, 0.0, false).is_err());
        assert!(init_anisotropic_weights(&cfg, &mut rng, 1.0, 1.5, false).is_err());
    }

    #[test]
    fn ar1_rows_are_serially_correlated_with_unit_variance() {
        let mut rng = SeededRng::new(27);
        let rho = 0.85;
        let x = gen_ar1_inputs(4000, 8, rho, &mut rng).unwrap();
        // Lag-1 autocorrelation per column should sit near rho, and the
        // marginal second moment near 1.
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 1..x.rows() {
            for j in 0..x.cols() {
                num += x.row(t)[j] * x.row(t - 1)[j];
                den += x.row(t)[j] * x.row(t)[j];
            }
        }
        let autocorr = num / den;
        assert!(
            (autocorr - rho).abs() < 0.05,
            "lag-1 autocorrelation {autocorr} far from {rho}"
        );
        let var = den / ((x.rows() - 1) as f64 * x.cols() as f64);
        assert!((var - 1.0).abs() < 0.1, "marginal variance {var} far from 1");
    }

    #[test]
    fn ar1_rejects_degenerate_arguments() {
        let mut rng = SeededRng::new(28);
        assert!(gen_ar1_inputs(0, 4, 0.5, &mut rng).is_err());
        assert!(gen_ar1_inputs(4, 0, 0.5, &mut rng).is_err());
        assert!(gen_ar1_inputs(4, 4, 1.0, &mut rng).is_err());
        assert!(gen_ar1_inputs(4, 4, -0.1, &mut rng).is_err());
    }
}
