//! Orthogonal reparameterization of the latent space.
//!
//! Attention through the latent cache is invariant under any orthogonal
//! change of latent basis: rotating the down-projection by `U` and the
//! expansions by `U^T` leaves every logit and output unchanged, because the
//! RMS statistic itself only depends on the (preserved) latent norm. That
//! freedom is used to pick a basis whose coordinates *slice well*: when the
//! latent is split across devices, each device sees only part of the vector,
//! and the quality of sliced-RMS and sliced-softmax approximations depends
//! on how energy and logit mass distribute over the slices.
//!
//! Three bases are built here:
//!
//! - **identity** — the model's native latent order, split as-is;
//! - **hadamard** — a scaled Walsh-Hadamard matrix (optionally composed with
//!   a random sign flip per coordinate) that spreads energy evenly across
//!   coordinates, equalizing slice norms;
//! - **pca** — eigenvectors of the latent second-moment matrix estimated
//!   from calibration data, concentrating energy into the leading slice.
//!
//! Each transform also carries per-slice scaling constants consumed by the
//! sliced decoder: `rms_scales[j]` is the reciprocal of slice `j`'s expected
//! energy fraction (so `sqrt(scale/d * |slice|^2 + eps)` estimates the full
//! RMS), and `logit_scales[j]` plays the same role for partial logits. For
//! identity and Hadamard the expected fractions are uniform and every scale
//! is just the group count.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mla::{absorb_gamma, WeightSet};
use crate::numerics::matrix::{dot, sqnorm};
use crate::numerics::symmetric_eig;
use crate::{Matrix, SeededRng};

/// Smallest slice energy fraction used when inverting fractions into
/// scales; fractions below this floor mark the build as rank-deficient.
const MIN_FRACTION: f64 = 1e-12;

/// Which basis a transform encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Hadamard,
    Pca,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "hadamard" => Ok(TransformKind::Hadamard),
            "pca" => Ok(TransformKind::Pca),
            other => Err(Error::arg(
                "TransformKind::from_str",
                format!("unknown transform '{other}' (identity, hadamard, pca)"),
            )),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TransformKind::Identity => "identity",
            TransformKind::Hadamard => "hadamard",
            TransformKind::Pca => "pca",
        };
        f.write_str(s)
    }
}

/// Per-slice scaling constants consumed by the sliced decoder, detached from
/// the transform matrix so sharding code cannot accidentally re-apply the
/// rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScales {
    pub group_count: usize,
    /// Reciprocal expected energy fraction per slice (RMS correction).
    pub rms: Vec<f64>,
    /// Partial-logit correction per slice (softmax estimation).
    pub logit: Vec<f64>,
}

impl SliceScales {
    /// Uniform scales for bases that split energy evenly: every entry is the
    /// group count.
    pub fn uniform(group_count: usize) -> Result<Self> {
        if group_count == 0 {
            return Err(Error::arg("SliceScales::uniform", "zero groups".to_string()));
        }
        Ok(SliceScales {
            group_count,
            rms: vec![group_count as f64; group_count],
            logit: vec![group_count as f64; group_count],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_count == 0
            || self.rms.len() != self.group_count
            || self.logit.len() != self.group_count
        {
            return Err(Error::arg(
                "SliceScales::validate",
                format!(
                    "{} rms / {} logit scales for {} groups",
                    self.rms.len(),
                    self.logit.len(),
                    self.group_count
                ),
            ));
        }
        for &s in self.rms.iter().chain(&self.logit) {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::arg(
                    "SliceScales::validate",
                    format!("scales must be positive and finite, got {s}"),
                ));
            }
        }
        Ok(())
    }
}

/// An orthogonal latent basis plus the per-slice constants it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalTransform {
    matrix: Matrix,
    kind: TransformKind,
    group_count: usize,
    rms_scales: Vec<f64>,
    logit_scales: Vec<f64>,
}

impl OrthogonalTransform {
    /// Assembles a transform from parts, checking shapes and scale counts.
    /// Orthogonality itself is not enforced here (the `verify` checks and
    /// the builders own that); see [`Self::orthogonality_error`].
    pub fn new(
        matrix: Matrix,
        kind: TransformKind,
        group_count: usize,
        rms_scales: Vec<f64>,
        logit_scales: Vec<f64>,
    ) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::shape(
                "OrthogonalTransform::new",
                format!("matrix is {}x{}", matrix.rows(), matrix.cols()),
            ));
        }
        if group_count == 0 || !matrix.rows().is_multiple_of(group_count) {
            return Err(Error::InvalidPlan(format!(
                "group count {} does not divide latent width {}",
                group_count,
                matrix.rows()
            )));
        }
        let t = OrthogonalTransform {
            matrix,
            kind,
            group_count,
            rms_scales,
            logit_scales,
        };
        t.scales().validate()?;
        Ok(t)
    }

    /// Identity basis: slices are the native coordinate blocks and scales
    /// assume even energy.
    pub fn identity(dim: usize, group_count: usize) -> Result<Self> {
        let scales = SliceScales::uniform(group_count)?;
        OrthogonalTransform::new(
            Matrix::identity(dim),
            TransformKind::Identity,
            group_count,
            scales.rms,
            scales.logit,
        )
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    /// Latent width each slice covers.
    pub fn slice_width(&self) -> usize {
        self.dim() / self.group_count
    }

    /// RMS correction for slice `j` (slice 0's value is conventionally
    /// called alpha, slice 1's beta).
    pub fn rms_scale(&self, j: usize) -> f64 {
        self.rms_scales[j]
    }

    /// Partial-logit correction for slice `j` (mu for slice 0, nu for 1).
    pub fn logit_scale(&self, j: usize) -> f64 {
        self.logit_scales[j]
    }

    pub fn alpha(&self) -> f64 {
        self.rms_scales[0]
    }

    pub fn beta(&self) -> f64 {
        self.rms_scales[1]
    }

    pub fn mu(&self) -> f64 {
        self.logit_scales[0]
    }

    pub fn nu(&self) -> f64 {
        self.logit_scales[1]
    }

    /// Expected energy fraction per slice (the reciprocals of the RMS
    /// scales).
    pub fn energy_fractions(&self) -> Vec<f64> {
        self.rms_scales.iter().map(|s| 1.0 / s).collect()
    }

    /// Detached copy of the scaling constants.
    pub fn scales(&self) -> SliceScales {
        SliceScales {
            group_count: self.group_count,
            rms: self.rms_scales.clone(),
            logit: self.logit_scales.clone(),
        }
    }

    /// Replaces the logit corrections, e.g. with re-estimated values from
    /// [`reestimate_logit_scales`].
    pub fn set_logit_scales(&mut self, logit: Vec<f64>) -> Result<()> {
        let candidate = SliceScales {
            group_count: self.group_count,
            rms: self.rms_scales.clone(),
            logit,
        };
        candidate.validate()?;
        self.logit_scales = candidate.logit;
        Ok(())
    }

    /// Largest deviation of `U^T U` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self
            .matrix
            .transpose()
            .matmul(&self.matrix)
            .expect("square matrix");
        let mut worst = 0.0f64;
        for i in 0..gram.rows() {
            for j in 0..gram.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - target).abs());
            }
        }
        worst
    }
}

/// Calibration features: rows of pre-normalization latent vectors collected
/// from the model (position features excluded).
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    features: Matrix,
    source: String,
}

impl CalibrationSet {
    pub fn new(features: Matrix, source: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::arg(
                "CalibrationSet::new",
                format!("features are {}x{}", features.rows(), features.cols()),
            ));
        }
        Ok(CalibrationSet {
            features,
            source: source.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Scaled Walsh-Hadamard transform, optionally composed with a seeded
/// random sign flip per coordinate (on by default in the CLI; the flip keeps
/// the matrix orthogonal and decorrelates it from any structure the model
/// happens to have in its native basis).
///
/// `dim` must be a power of two. The Sylvester recursion doubles
/// `H_{2n} = [[H, H], [H, -H]]` starting from `H_1 = (1)`, then the whole
/// matrix is scaled by `1/sqrt(dim)` so columns are unit vectors. Expected
/// slice energy is uniform, so all scales equal `group_count`.
pub fn build_hadamard(
    dim: usize,
    group_count: usize,
    rng: &mut SeededRng,
    randomize_signs: bool,
) -> Result<OrthogonalTransform> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::arg(
            "build_hadamard",
            format!("dim must be a nonzero power of two, got {dim}"),
        ));
    }
    let mut h = vec![vec![1.0f64]];
    let mut n = 1;
    while n < dim {
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for (i, row) in h.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                next[i][j] = v;
                next[i][j + n] = v;
                next[i + n][j] = v;
                next[i + n][j + n] = -v;
            }
        }
        h = next;
        n *= 2;
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut matrix = Matrix::from_rows(&h)?.scale(scale);
    if randomize_signs {
        // Right-multiply by a random +-1 diagonal: one draw per column, in
        // ascending column order, so the structure is seed-reproducible.
        for c in 0..dim {
            let s = rng.next_sign();
            if s < 0.0 {
                matrix.scale_col(c, -1.0);
            }
        }
    }
    let scales = SliceScales::uniform(group_count)?;
    OrthogonalTransform::new(
        matrix,
        TransformKind::Hadamard,
        group_count,
        scales.rms,
        scales.logit,
    )
}

/// Result of a PCA build: the transform plus the spectrum it came from.
#[derive(Debug, Clone)]
pub struct PcaBuild {
    pub transform: OrthogonalTransform,
    /// Eigenvalues of the (second-moment or covariance) matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Energy fraction captured by each slice, in slice order.
    pub energy_fractions: Vec<f64>,
    /// True when the calibration set cannot pin down all directions: fewer
    /// rows than dimensions, or a spectrum that collapses to (near) zero.
    pub rank_deficient: bool,
}

/// Principal-component basis from calibration latents.
///
/// By default the *uncentered* second-moment matrix `F^T F / n` is
/// decomposed — RMS normalization divides by the uncentered norm, so that is
/// the statistic slicing actually splits. With `center` the column means
/// are removed first (classical covariance).
///
/// Eigenvectors are ordered by descending eigenvalue, so slice 0 captures
/// the most energy; `rms_scales[j]` is the reciprocal of slice `j`'s energy
/// fraction and the logit scales start equal to the RMS scales.
pub fn build_pca(cal: &CalibrationSet, group_count: usize, center: bool) -> Result<PcaBuild> {
    let d = cal.dim();
    if group_count == 0 || !d.is_multiple_of(group_count) {
        return Err(Error::InvalidPlan(format!(
            "group count {group_count} does not divide latent width {d}"
        )));
    }
    let n = cal.rows();
    let f = if center {
        let mut means = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in means.iter_mut().zip(cal.features().row(r)) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut centered = cal.features().clone();
        for r in 0..n {
            let row = centered.row_mut(r);
            for (v, m) in row.iter_mut().zip(&means) {
                *v -= m;
            }
        }
        centered
    } else {
        cal.features().clone()
    };

    let moment = f.transpose().matmul(&f)?.scale(1.0 / n as f64);
    if moment.max_abs() == 0.0 {
        return Err(Error::DegenerateCalibration(
            "all-zero features (no energy to decompose)".to_string(),
        ));
    }
    let (mut eigenvalues, vectors) = symmetric_eig(&moment, 1e-8)?;
    // Gram spectra are nonnegative up to round-off; clamp the dust.
    for e in &mut eigenvalues {
        if *e < 0.0 {
            *e = 0.0;
        }
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateCalibration(
            "spectrum sums to zero".to_string(),
        ));
    }

    let width = d / group_count;
    let mut fractions = Vec::with_capacity(group_count);
    for j in 0..group_count {
        let slice_sum: f64 = eigenvalues[j * width..(j + 1) * width].iter().sum();
        fractions.push(slice_sum / total);
    }
    let floored = fractions.iter().any(|&fr| fr < MIN_FRACTION);
    let rank_deficient =
        n < d || floored || eigenvalues[d - 1] <= 1e-12 * eigenvalues[0].max(f64::MIN_POSITIVE);
    let rms_scales: Vec<f64> = fractions
        .iter()
        .map(|&fr| 1.0 / fr.max(MIN_FRACTION))
        .collect();
    let logit_scales = rms_scales.clone();

    let transform = OrthogonalTransform::new(
        vectors,
        TransformKind::Pca,
        group_count,
        rms_scales,
        logit_scales,
    )?;
    Ok(PcaBuild {
        transform,
        eigenvalues,
        energy_fractions: fractions,
        rank_deficient,
    })
}

/// Haar-ish random orthogonal matrix: modified Gram-Schmidt applied to a
/// square Gaussian draw. Used by property tests to exercise invariance
/// beyond the named bases.
pub fn random_orthogonal(dim: usize, rng: &mut SeededRng) -> Matrix {
    assert!(dim > 0, "dimension must be positive");
    loop {
        let g = rng.gaussian_matrix(dim, dim, 1.0);
        if let Some(q) = gram_schmidt(&g) {
            return q;
        }
        // Astronomically unlikely rank deficiency: redraw deterministically.
    }
}

fn gram_schmidt(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a.get(i, j)).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let proj = dot(&cols[j], &cols[k]);
            let prev = cols[k].clone();
            for (v, p) in cols[j].iter_mut().zip(&prev) {
                *v -= proj * p;
            }
        }
        let norm = sqnorm(&cols[j]).sqrt();
        if norm < 1e-9 {
            return None;
        }
        for v in &mut cols[j] {
            *v /= norm;
        }
    }
    let mut q = Matrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q.set(i, j, v);
        }
    }
    Some(q)
}

/// Rotates the latent basis of a weight set by `t`.
///
/// The normalization gain is folded into the expansions first (a non-unit
/// gain does not commute with a basis change), then
/// `kv_down <- kv_down * U`, `k_up <- U^T * k_up`, `v_up <- U^T * v_up`.
/// For orthogonal `U` the composite maps `c -> c U` and back, so attention
/// outputs are unchanged up to round-off.
pub fn apply_transform(
    cfg: &ModelConfig,
    w: &WeightSet,
    t: &OrthogonalTransform,
) -> Result<WeightSet> {
    if t.dim() != cfg.latent_dim {
        return Err(Error::shape(
            "apply_transform",
            format!("transform dim {} vs latent width {}", t.dim(), cfg.latent_dim),
        ));
    }
    let mut out = absorb_gamma(cfg, w)?;
    let ut = t.matrix().transpose();
    out.kv_down = out.kv_down.matmul(t.matrix())?;
    out.k_up = ut.matmul(&out.k_up)?;
    out.v_up = ut.matmul(&out.v_up)?;
    Ok(out)
}

/// How feature energy actually lands on the slices of a basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub group_count: usize,
    pub rows: usize,
    /// Mean share of row energy landing in each slice.
    pub mean_fractions: Vec<f64>,
    /// Mean over rows of `max_j |share_j - 1/g|`; zero for perfectly even
    /// rows.
    pub mean_imbalance: f64,
    /// Worst single-row imbalance.
    pub max_imbalance: f64,
}

/// Measures per-row slice-energy shares of the calibration features in the
/// basis of `t`, split into `group_count` equal slices.
pub fn partition_energy(
    cal: &CalibrationSet,
    t: &OrthogonalTransform,
    group_count: usize,
) -> Result<EnergyReport> {
    if t.dim() != cal.dim() {
        return Err(Error::shape(
            "partition_energy",
            format!("transform dim {} vs feature width {}", t.dim(), cal.dim()),
        ));
    }
    if group_count == 0 || !cal.dim().is_multiple_of(group_count) {
        return Err(Error::InvalidPlan(format!(
            "group count {group_count} does not divide width {}",
            cal.dim()
        )));
    }
    let rotated = cal.features().matmul(t.matrix())?;
    let width = cal.dim() / group_count;
    let even = 1.0 / group_count as f64;
    let mut mean_fractions = vec![0.0; group_count];
    let mut mean_imbalance = 0.0;
    let mut max_imbalance = 0.0f64;
    let mut counted = 0usize;
    for r in 0..rotated.rows() {
        let row = rotated.row(r);
        let total = sqnorm(row);
        if total == 0.0 {
            continue; // a zero row carries no information about splitting
        }
        let mut row_imb = 0.0f64;
        for j in 0..group_count {
            let share = sqnorm(&row[j * width..(j + 1) * width]) / total;
            mean_fractions[j] += share;
            row_imb = row_imb.max((share - even).abs());
        }
        mean_imbalance += row_imb;
        max_imbalance = max_imbalance.max(row_imb);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::DegenerateCalibration(
            "every feature row is zero".to_string(),
        ));
    }
    for f in &mut mean_fractions {
        *f /= counted as f64;
    }
    Ok(EnergyReport {
        group_count,
        rows: counted,
        mean_fractions,
        mean_imbalance: mean_imbalance / counted as f64,
        max_imbalance,
    })
}

/// Least-squares refit of the partial-logit corrections.
///
/// Rows of the calibration set are rotated into the basis of `t`, RMS
/// normalized, and paired up `(row 2i, row 2i+1)` as stand-ins for
/// query/key latents. For each slice `j` the scale minimizing
/// `sum (mu_j * partial_j - total)^2` over pairs is returned:
/// `mu_j = sum(partial_j * total) / sum(partial_j^2)`. Slices whose partials
/// carry no signal fall back to the transform's stored value.
pub fn reestimate_logit_scales(
    cal: &CalibrationSet,
    t: &OrthogonalTransform,
) -> Result<Vec<f64>> {
    if t.dim() != cal.dim() {
        return Err(Error::shape(
            "reestimate_logit_scales",
            format!("transform dim {} vs feature width {}", t.dim(), cal.dim()),
        ));
    }
    if cal.rows() < 2 {
        return Err(Error::DegenerateCalibration(
            "need at least two rows to form a pair".to_string(),
        ));
    }
    let rotated = cal.features().matmul(t.matrix())?;
    let d = cal.dim();
    let width = t.slice_width();
    let g = t.group_count();

    // RMS-normalize rows (unit gain, no stabilizer: calibration rows with
    // zero norm are skipped instead).
    let mut unit_rows: Vec<Vec<f64>> = Vec::with_capacity(rotated.rows());
    for r in 0..rotated.rows() {
        let row = rotated.row(r);
        let ss = sqnorm(row);
        if ss == 0.0 {
            continue;
        }
        let denom = (ss / d as f64).sqrt();
        unit_rows.push(row.iter().map(|v| v / denom).collect());
    }
    if unit_rows.len() < 2 {
        return Err(Error::DegenerateCalibration(
            "fewer than two nonzero rows".to_string(),
        ));
    }

    let mut num = vec![0.0; g];
    let mut den = vec![0.0; g];
    for pair in unit_rows.chunks_exact(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let total = dot(a, b);
        for j in 0..g {
            let partial = dot(&a[j * width..(j + 1) * width], &b[j * width..(j + 1) * width]);
            num[j] += partial * total;
            den[j] += partial * partial;
        }
    }
    let scales: Vec<f64> = (0..g)
        .map(|j| {
            if den[j] > 0.0 && num[j] / den[j] > 0.0 {
                num[j] / den[j]
            } else {
                t.logit_scale(j) // no usable signal; keep the prior
            }
        })
        .collect();
    Ok(scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mla::{init_weights, mla_prefill};

    #[test]
    fn hadamard_base_cases() {
        let mut rng = SeededRng::new(1);
        let t1 = build_hadamard(1, 1, &mut rng, false).unwrap();
        assert_eq!(t1.matrix().get(0, 0), 1.0);
        let t2 = build_hadamard(2, 1, &mut rng, false).unwrap();
        let r = 0.5f64.sqrt();
        for (i, j, want) in [(0, 0, r), (0, 1, r), (1, 0, r), (1, 1, -r)] {
            assert!((t2.matrix().get(i, j) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn hadamard_spreads_a_spike_evenly() {
        let mut rng = SeededRng::new(2);
        let t = build_hadamard(4, 2, &mut rng, false).unwrap();
        let spike = Matrix::from_row(&[100.0, 0.0, 0.0, 0.0]);
        let spread = spike.matmul(t.matrix()).unwrap();
        for c in 0..4 {
            assert!((spread.get(0, c) - 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sliced_logits_can_cancel_even_when_norms_balance() {
        // Rotating a query spike and a key spike on different coordinates
        // balances both norms, but the per-coordinate products split into
        // half-sums of +-4000 around a true total of zero: balanced energy
        // does not imply faithful partial logits.
        let mut rng = SeededRng::new(3);
        let t = build_hadamard(4, 2, &mut rng, false).unwrap();
        let q = Matrix::from_row(&[100.0, 0.0, 0.0, 0.0])
            .matmul(t.matrix())
            .unwrap();
        let c = Matrix::from_row(&[0.0, 0.0, 80.0, 0.0])
            .matmul(t.matrix())
            .unwrap();
        let products: Vec<f64> = (0..4).map(|i| q.get(0, i) * c.get(0, i)).collect();
        assert_eq!(products, vec![2000.0, 2000.0, -2000.0, -2000.0]);
        let first: f64 = products[..2].iter().sum();
        let second: f64 = products[2..].iter().sum();
        assert_eq!(first, 4000.0);
        assert_eq!(second, -4000.0);
        assert_eq!(first + second, 0.0);
    }

    #[test]
    fn hadamard_with_random_signs_stays_orthogonal() {
        let mut rng = SeededRng::new(4);
        let t = build_hadamard(8, 2, &mut rng, true).unwrap();
        assert!(t.orthogonality_error() < 1e-12);
        assert_eq!(t.alpha(), 2.0);
        assert_eq!(t.beta(), 2.0);
        assert_eq!(t.mu(), 2.0);
        assert_eq!(t.nu(), 2.0);
    }

    #[test]
    fn hadamard_sign_flip_is_seeded() {
        let a = build_hadamard(8, 2, &mut SeededRng::new(5), true).unwrap();
        let b = build_hadamard(8, 2, &mut SeededRng::new(5), true).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        let c = build_hadamard(8, 2, &mut SeededRng::new(6), true).unwrap();
        assert_ne!(a.matrix(), c.matrix());
    }

    #[test]
    fn hadamard_rejects_non_power_of_two() {
        let mut rng = SeededRng::new(7);
        assert!(build_hadamard(12, 2, &mut rng, false).is_err());
        assert!(build_hadamard(0, 1, &mut rng, false).is_err());
    }

    #[test]
    fn pca_recovers_a_known_axis_aligned_spectrum() {
        // Four rows engineered so F^T F / 4 = diag(4, 3, 2, 1) exactly.
        let f = Matrix::from_rows(&[
            vec![4.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.0 * 3f64.sqrt(), 0.0, 0.0],
            vec![0.0, 0.0, 2.0 * 2f64.sqrt(), 0.0],
            vec![0.0, 0.0, 0.0, 2.0],
        ])
        .unwrap();
        let cal = CalibrationSet::new(f, "synthetic").unwrap();
        let pca = build_pca(&cal, 2, false).unwrap();
        for (got, want) in pca.eigenvalues.iter().zip([4.0, 3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        // Leading slice holds (4+3)/10 of the energy.
        assert!((pca.energy_fractions[0] - 0.7).abs() < 1e-10);
        assert!((pca.energy_fractions[1] - 0.3).abs() < 1e-10);
        assert!((pca.transform.alpha() - 10.0 / 7.0).abs() < 1e-9);
        assert!((pca.transform.beta() - 10.0 / 3.0).abs() < 1e-9);
        // Already axis-aligned: the basis is the identity.
        assert!(pca.transform.matrix().max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-10);
        assert!(!pca.rank_deficient);
    }

    #[test]
    fn pca_on_isotropic_data_gives_even_fractions() {
        let mut rng = SeededRng::new(8);
        let cal = CalibrationSet::new(rng.gaussian_matrix(4096, 8, 1.0), "iso").unwrap();
        let pca = build_pca(&cal, 2, false).unwrap();
        assert!(pca.transform.orthogonality_error() < 1e-10);
        assert!((pca.transform.alpha() - 2.0).abs() < 0.1, "alpha {}", pca.transform.alpha());
        assert!(!pca.rank_deficient);
    }

    #[test]
    fn pca_centering_changes_the_answer_for_shifted_data() {
        let mut rng = SeededRng::new(9);
        let mut f = rng.gaussian_matrix(512, 4, 0.1);
        for r in 0..f.rows() {
            f.row_mut(r)[2] += 10.0; // large mean on one coordinate
        }
        let cal = CalibrationSet::new(f, "shifted").unwrap();
        let raw = build_pca(&cal, 2, false).unwrap();
        let centered = build_pca(&cal, 2, true).unwrap();
        // Uncentered: the mean dominates, the leading direction is ~e2 and
        // the top slice eats nearly everything. Centered: isotropic again.
        assert!(raw.energy_fractions[0] > 0.95);
        assert!((centered.energy_fractions[0] - 0.5).abs() < 0.1);
    }

    #[test]
    fn pca_flags_rank_deficiency() {
        let mut rng = SeededRng::new(10);
        let cal = CalibrationSet::new(rng.gaussian_matrix(3, 8, 1.0), "thin").unwrap();
        let pca = build_pca(&cal, 2, false).unwrap();
        assert!(pca.rank_deficient);
    }

    #[test]
    fn pca_rejects_all_zero_features() {
        let cal = CalibrationSet::new(Matrix::zeros(16, 4), "zeros");
        // Zero matrices are accepted as a set but rejected by the build.
        let cal = cal.unwrap();
        assert!(matches!(
            build_pca(&cal, 2, false),
            Err(Error::DegenerateCalibration(_))
        ));
    }

    #[test]
    fn random_orthogonal_is_orthonormal() {
        let mut rng = SeededRng::new(11);
        let q = random_orthogonal(16, &mut rng);
        let gram = q.transpose().matmul(&q).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(16)).unwrap() < 1e-10);
    }

    #[test]
    fn transforms_preserve_prefill_outputs() {
        let cfg = ModelConfig::toy();
        let mut rng = SeededRng::new(12);
        let mut w = init_weights(&cfg, &mut rng, 1.0).unwrap();
        w.perturb_gamma(&mut rng, 0.4); // exercise the gamma-folding path
        let x = rng.gaussian_matrix(6, cfg.hidden_dim, 1.0);
        let (base, _) = mla_prefill(&cfg, &w, &x).unwrap();

        let hadamard = build_hadamard(cfg.latent_dim, 2, &mut rng, true).unwrap();
        let identity = OrthogonalTransform::identity(cfg.latent_dim, 2).unwrap();
        for t in [&identity, &hadamard] {
            let rotated = apply_transform(&cfg, &w, t).unwrap();
            let (out, _) = mla_prefill(&cfg, &rotated, &x).unwrap();
            let err = out.max_abs_diff(&base).unwrap();
            assert!(err < 1e-9, "{:?}: {err:e}", t.kind());
        }
    }

    #[test]
    fn apply_transform_rejects_width_mismatch() {
        let cfg = ModelConfig::toy();
        let mut rng = SeededRng::new(13);
        let w = init_weights(&cfg, &mut rng, 1.0).unwrap();
        let t = OrthogonalTransform::identity(16, 2).unwrap();
        assert!(apply_transform(&cfg, &w, &t).is_err());
    }

    #[test]
    fn partition_energy_reports_concentration_and_balance() {
        // All energy on the first two of four coordinates.
        let mut rng = SeededRng::new(14);
        let mut f = rng.gaussian_matrix(256, 4, 1.0);
        for r in 0..f.rows() {
            let row = f.row_mut(r);
            row[2] = 0.0;
            row[3] = 0.0;
        }
        let cal = CalibrationSet::new(f, "front-loaded").unwrap();

        let identity = OrthogonalTransform::identity(4, 2).unwrap();
        let id_report = partition_energy(&cal, &identity, 2).unwrap();
        assert!(id_report.mean_fractions[0] > 0.999);
        assert!((id_report.mean_imbalance - 0.5).abs() < 1e-9);

        let mut rng2 = SeededRng::new(15);
        let hadamard = build_hadamard(4, 2, &mut rng2, false).unwrap();
        let h_report = partition_energy(&cal, &hadamard, 2).unwrap();
        assert!(h_report.mean_imbalance < id_report.mean_imbalance);
        assert!((h_report.mean_fractions[0] - 0.5).abs() < 0.2);
    }

    #[test]
    fn reestimate_recovers_exact_scale_for_duplicated_slices() {
        // Rows whose second slice copies the first make every partial logit
        // exactly half the total, so the least-squares fit is exactly 2.
        let mut rng = SeededRng::new(16);
        let half = rng.gaussian_matrix(64, 8, 1.0);
        let f = Matrix::concat_cols(&[&half, &half]).unwrap();
        let cal = CalibrationSet::new(f, "mirrored").unwrap();
        let t = OrthogonalTransform::identity(16, 2).unwrap();
        let scales = reestimate_logit_scales(&cal, &t).unwrap();
        for s in scales {
            assert!((s - 2.0).abs() < 1e-10, "scale {s}");
        }
    }

    #[test]
    fn reestimate_shrinks_toward_one_for_independent_slices() {
        // With isotropic features the two slice partials are uncorrelated,
        // so the other slice contributes only zero-mean noise to the total
        // and the best least-squares multiplier is ~1, well below the
        // energy-fraction prior of 2. This is exactly the situation the
        // refit exists to detect.
        let mut rng = SeededRng::new(17);
        let cal = CalibrationSet::new(rng.gaussian_matrix(4096, 16, 1.0), "iso").unwrap();
        let t = OrthogonalTransform::identity(16, 2).unwrap();
        let scales = reestimate_logit_scales(&cal, &t).unwrap();
        assert_eq!(scales.len(), 2);
        for s in scales {
            assert!((s - 1.0).abs() < 0.35, "scale {s}");
        }
    }

    #[test]
    fn scale_accessors_match_fraction_reciprocals() {
        let t = OrthogonalTransform::new(
            Matrix::identity(4),
            TransformKind::Pca,
            2,
            vec![10.0 / 7.0, 10.0 / 3.0],
            vec![10.0 / 7.0, 10.0 / 3.0],
        )
        .unwrap();
        let fr = t.energy_fractions();
        assert!((fr[0] - 0.7).abs() < 1e-12);
        assert!((fr[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn transform_kind_parses_and_displays() {
        use std::str::FromStr;
        for (s, k) in [
            ("identity", TransformKind::Identity),
            ("hadamard", TransformKind::Hadamard),
            ("pca", TransformKind::Pca),
        ] {
            assert_eq!(TransformKind::from_str(s).unwrap(), k);
            assert_eq!(k.to_string(), s);
        }
        assert!(TransformKind::from_str("dct").is_err());
    }
}
