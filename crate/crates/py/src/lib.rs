//! Python bindings for the latent-attention harness.
//!
//! Exposes the main types and operations of `tpla-core` as an extension
//! module named `tpla`: model configuration, weight initialization, the
//! reference prefill/decode pair, orthogonal latent reparameterization,
//! simulated sharded decoding, the pipeline comparison driver, the
//! analytical cost model, and the built-in verification suites.
//!
//! Matrices cross the boundary as `list[list[float]]` row-major nested
//! lists; reports cross as pretty-printed JSON strings so Python callers
//! can `json.loads` them without a bespoke class per report.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tpla_core::cost::{self, AttentionMode, DeploymentSpec};
use tpla_core::mla::{self, WeightSet};
use tpla_core::pipeline::{self, FeedMode};
use tpla_core::reparam::{self, CalibrationSet, OrthogonalTransform};
use tpla_core::shard::{self, CollectiveStats, Exactness, ShardCache, ShardMode};
use tpla_core::synth;
use tpla_core::verify;
use tpla_core::{Matrix, ModelConfig, SeededRng};

fn err(e: tpla_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = tpla_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Model shape: hidden width, head count and sizes, latent width, query
/// rank, and the normalization epsilon.
#[pyclass(frozen)]
struct Config {
    inner: ModelConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (hidden_dim, num_heads, head_dim, rope_dim, latent_dim, q_rank, eps=1e-6))]
    fn new(
        hidden_dim: usize,
        num_heads: usize,
        head_dim: usize,
        rope_dim: usize,
        latent_dim: usize,
        q_rank: usize,
        eps: f64,
    ) -> PyResult<Self> {
        let inner =
            ModelConfig::new(hidden_dim, num_heads, head_dim, rope_dim, latent_dim, q_rank, eps)
                .map_err(err)?;
        Ok(Self { inner })
    }

    /// Named configuration: `"toy"` (desk-scale) or `"dsv3-dims"`
    /// (production-scale dimensions for cost accounting).
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelConfig::preset(name).map_err(err)? })
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.num_heads
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim
    }

    #[getter]
    fn rope_dim(&self) -> usize {
        self.inner.rope_dim
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim
    }

    #[getter]
    fn q_rank(&self) -> usize {
        self.inner.q_rank
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.inner.eps
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Config(hidden_dim={}, num_heads={}, head_dim={}, rope_dim={}, latent_dim={}, q_rank={}, eps={})",
            c.hidden_dim, c.num_heads, c.head_dim, c.rope_dim, c.latent_dim, c.q_rank, c.eps
        )
    }
}

/// Opaque projection weights tied to the configuration they were drawn for.
#[pyclass(frozen)]
struct Weights {
    config: ModelConfig,
    inner: WeightSet,
}

#[pymethods]
impl Weights {
    fn __repr__(&self) -> String {
        format!(
            "Weights(hidden_dim={}, num_heads={}, latent_dim={})",
            self.config.hidden_dim, self.config.num_heads, self.config.latent_dim
        )
    }
}

/// Orthogonal latent basis change plus the per-slice constants sharded
/// decoding needs.
#[pyclass(frozen)]
struct Transform {
    inner: OrthogonalTransform,
}

#[pymethods]
impl Transform {
    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn group_count(&self) -> usize {
        self.inner.group_count()
    }

    /// Normalization rescale for the first slice (uniform builders use one
    /// shared value per slice).
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    /// Expected share of latent energy landing in each slice.
    fn energy_fractions(&self) -> Vec<f64> {
        self.inner.energy_fractions()
    }

    /// Max-abs deviation of `U U^T` from the identity.
    fn orthogonality_error(&self) -> f64 {
        self.inner.orthogonality_error()
    }

    /// Writes the transform to the container file format used by the CLI.
    fn save(&self, path: &str) -> PyResult<()> {
        tpla_core::container::save_transform(std::path::Path::new(path), &self.inner, &[])
            .map_err(err)
    }

    /// Reads a transform written by `save` or by `tpla calibrate`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner =
            tpla_core::container::load_transform(std::path::Path::new(path)).map_err(err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Transform(kind='{}', dim={}, group_count={})",
            self.inner.kind(),
            self.inner.dim(),
            self.inner.group_count()
        )
    }
}

/// Gaussian weight draw, seeded.
#[pyfunction]
#[pyo3(signature = (config, seed, scale=1.0))]
fn init_weights(config: &Config, seed: u64, scale: f64) -> PyResult<Weights> {
    let mut rng = SeededRng::new(seed);
    let inner = mla::init_weights(&config.inner, &mut rng, scale).map_err(err)?;
    Ok(Weights { config: config.inner.clone(), inner })
}

/// Weight draw whose latent spectrum decays geometrically (optionally spun
/// by a random orthogonal basis), for experiments where a coordinate-aligned
/// latent split should be a bad one.
#[pyfunction]
#[pyo3(signature = (config, seed, scale=1.0, decay=0.8, rotate=true))]
fn anisotropic_weights(
    config: &Config,
    seed: u64,
    scale: f64,
    decay: f64,
    rotate: bool,
) -> PyResult<Weights> {
    let mut rng = SeededRng::new(seed);
    let inner =
        synth::init_anisotropic_weights(&config.inner, &mut rng, scale, decay, rotate).map_err(err)?;
    Ok(Weights { config: config.inner.clone(), inner })
}

/// Token rows with AR(1) correlation `rho` between consecutive rows and
/// unit marginal variance (`rho=0` gives independent rows).
#[pyfunction]
fn ar1_inputs(rows: usize, dim: usize, rho: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let mut rng = SeededRng::new(seed);
    let m = synth::gen_ar1_inputs(rows, dim, rho, &mut rng).map_err(err)?;
    Ok(from_matrix(&m))
}

/// Full-sequence attention pass: one output row per input row.
#[pyfunction]
fn prefill(weights: &Weights, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let x = to_matrix(x)?;
    let (out, _cache) = mla::mla_prefill(&weights.config, &weights.inner, &x).map_err(err)?;
    Ok(from_matrix(&out))
}

/// Token-by-token decode over the same rows, via the absorbed latent-space
/// formulation and an incrementally grown cache. Matches `prefill` on the
/// same inputs to round-off.
#[pyfunction]
fn decode(weights: &Weights, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = &weights.config;
    let x = to_matrix(x)?;
    let aw = mla::absorb(cfg, &weights.inner).map_err(err)?;
    let mut cache = mla::LatentCache::empty(cfg);
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.slice_rows(i, i + 1).map_err(err)?;
        let y = mla::mla_decode_step(cfg, &weights.inner, &aw, &row, &mut cache).map_err(err)?;
        out.push(y.row(0).to_vec());
    }
    Ok(out)
}

/// Identity basis with uniform per-slice constants.
#[pyfunction]
#[pyo3(signature = (dim, groups=1))]
fn identity_transform(dim: usize, groups: usize) -> PyResult<Transform> {
    Ok(Transform { inner: OrthogonalTransform::identity(dim, groups).map_err(err)? })
}

/// Scaled Hadamard basis (optionally with randomized column signs), which
/// spreads latent energy evenly across slices.
#[pyfunction]
#[pyo3(signature = (dim, groups, seed, randomize_signs=true))]
fn hadamard_transform(
    dim: usize,
    groups: usize,
    seed: u64,
    randomize_signs: bool,
) -> PyResult<Transform> {
    let mut rng = SeededRng::new(seed);
    let inner = reparam::build_hadamard(dim, groups, &mut rng, randomize_signs).map_err(err)?;
    Ok(Transform { inner })
}

/// PCA basis estimated from calibration feature rows (e.g. collected
/// latents), ordered so slices receive balanced energy.
#[pyfunction]
#[pyo3(signature = (features, groups, center=false))]
fn pca_transform(features: Vec<Vec<f64>>, groups: usize, center: bool) -> PyResult<Transform> {
    let cal = CalibrationSet::new(to_matrix(features)?, "python").map_err(err)?;
    let build = reparam::build_pca(&cal, groups, center).map_err(err)?;
    Ok(Transform { inner: build.transform })
}

/// Pre-normalization latent rows produced by the model on seeded Gaussian
/// inputs — the natural calibration features for `pca_transform`.
#[pyfunction]
fn collect_latent_features(weights: &Weights, seed: u64, rows: usize) -> PyResult<Vec<Vec<f64>>> {
    let mut rng = SeededRng::new(seed);
    let cal =
        synth::collect_latents(&weights.config, &weights.inner, &mut rng, rows).map_err(err)?;
    Ok(from_matrix(cal.features()))
}

/// Rotates the latent basis of a weight set by the transform. The computed
/// function is unchanged up to round-off.
#[pyfunction]
fn transform_weights(weights: &Weights, transform: &Transform) -> PyResult<Weights> {
    let inner =
        reparam::apply_transform(&weights.config, &weights.inner, &transform.inner).map_err(err)?;
    Ok(Weights { config: weights.config.clone(), inner })
}

/// Token-by-token decode on a simulated multi-device plan.
///
/// Applies the transform to the weights, splits them across `devices`
/// devices in `groups` latent groups, and feeds the rows one at a time.
/// `mode` is `"tpla"`, `"gla"`, or `"mla_heads"`; `exactness` is
/// `"sliced"`, `"exact_rms"`, `"exact_softmax"`, or `"exact_both"`
/// (ignored outside `tpla`). Returns one output row per input row.
#[pyfunction]
#[pyo3(signature = (weights, transform, x, devices, groups, mode="tpla", exactness="sliced"))]
#[allow(clippy::too_many_arguments)]
fn sharded_decode(
    weights: &Weights,
    transform: &Transform,
    x: Vec<Vec<f64>>,
    devices: usize,
    groups: usize,
    mode: &str,
    exactness: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = &weights.config;
    let mode: ShardMode = parse(mode)?;
    let exactness: Exactness = parse(exactness)?;
    let x = to_matrix(x)?;
    let plan = shard::make_plan(cfg, devices, groups, mode).map_err(err)?;
    let w_rot = reparam::apply_transform(cfg, &weights.inner, &transform.inner).map_err(err)?;
    let scales = transform.inner.scales();
    let shards = shard::build_shards(cfg, &w_rot, &plan, Some(&scales)).map_err(err)?;
    let mut caches: Vec<ShardCache> = shards.iter().map(ShardCache::empty).collect();
    let mut stats = CollectiveStats::default();
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.slice_rows(i, i + 1).map_err(err)?;
        let y = shard::sharded_decode_step(cfg, &plan, &shards, &mut caches, &row, exactness, &mut stats)
            .map_err(err)?;
        out.push(y.row(0).to_vec());
    }
    Ok(out)
}

/// Runs the three-variant pipeline comparison (reference, sharded decode
/// from scratch, prefill handed off to sharded decode) and returns the
/// report as a JSON string.
#[pyfunction]
#[pyo3(signature = (weights, transform, prompt, devices, groups, exactness="sliced", steps=16, feed="closed_loop"))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    weights: &Weights,
    transform: &Transform,
    prompt: Vec<Vec<f64>>,
    devices: usize,
    groups: usize,
    exactness: &str,
    steps: usize,
    feed: &str,
) -> PyResult<String> {
    let cfg = &weights.config;
    let exactness: Exactness = parse(exactness)?;
    let feed: FeedMode = parse(feed)?;
    let prompt = to_matrix(prompt)?;
    let plan = shard::make_plan(cfg, devices, groups, ShardMode::Tpla).map_err(err)?;
    let run = pipeline::run_pipeline(
        cfg,
        &weights.inner,
        &transform.inner,
        &plan,
        exactness,
        &prompt,
        steps,
        feed,
    )
    .map_err(err)?;
    let report = run.report(cfg, &transform.inner, &plan);
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn attention_mode(mode: &str, kv_heads: usize) -> PyResult<AttentionMode> {
    match mode {
        "mla" => Ok(AttentionMode::Mla),
        "tpla" => Ok(AttentionMode::Tpla),
        "gqa" => Ok(AttentionMode::Gqa { kv_heads }),
        other => Err(PyValueError::new_err(format!(
            "unknown attention mode '{other}' (expected mla, tpla, or gqa)"
        ))),
    }
}

/// Per-token, per-device KV-cache footprint as `(elements, bytes)`.
#[pyfunction]
#[pyo3(signature = (config, mode, devices=1, groups=1, kv_heads=8, context=4096, query=512, batch=1, bytes_per_element=2))]
#[allow(clippy::too_many_arguments)]
fn kv_cache_per_token(
    config: &Config,
    mode: &str,
    devices: usize,
    groups: usize,
    kv_heads: usize,
    context: usize,
    query: usize,
    batch: usize,
    bytes_per_element: usize,
) -> PyResult<(usize, usize)> {
    let spec = DeploymentSpec {
        config: config.inner.clone(),
        mode: attention_mode(mode, kv_heads)?,
        devices,
        groups,
        context_len: context,
        query_len: query,
        batch,
        bytes_per_element,
        bandwidth_bytes_per_s: 3.35e12,
        compute_flops_per_s: 9.9e14,
    };
    spec.validate().map_err(err)?;
    let kv = cost::kv_per_token(&spec).map_err(err)?;
    Ok((kv.elements, kv.bytes))
}

/// Full analytical cost report (cache footprint, FLOPs, collective bytes,
/// decode regime, ratios against the single-device baseline) as JSON.
#[pyfunction]
#[pyo3(signature = (config, mode, devices, groups, context, query, kv_heads=8, batch=1, bytes_per_element=2, bandwidth=3.35e12, compute=9.9e14))]
#[allow(clippy::too_many_arguments)]
fn cost_summary(
    config: &Config,
    mode: &str,
    devices: usize,
    groups: usize,
    context: usize,
    query: usize,
    kv_heads: usize,
    batch: usize,
    bytes_per_element: usize,
    bandwidth: f64,
    compute: f64,
) -> PyResult<String> {
    let spec = DeploymentSpec {
        config: config.inner.clone(),
        mode: attention_mode(mode, kv_heads)?,
        devices,
        groups,
        context_len: context,
        query_len: query,
        batch,
        bytes_per_element,
        bandwidth_bytes_per_s: bandwidth,
        compute_flops_per_s: compute,
    };
    spec.validate().map_err(err)?;
    let report = cost::cost_report(&spec).map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs every built-in verification suite at the given seed. Returns
/// `(all_passed, report_json)`.
#[pyfunction]
#[pyo3(signature = (config, seed=7))]
fn verify_all(config: &Config, seed: u64) -> PyResult<(bool, String)> {
    let reports = verify::run_all_suites(&config.inner, seed);
    let passed = reports.iter().all(|r| r.passed());
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((passed, json))
}

#[pymodule]
fn tpla(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Weights>()?;
    m.add_class::<Transform>()?;
    m.add_function(wrap_pyfunction!(init_weights, m)?)?;
    m.add_function(wrap_pyfunction!(anisotropic_weights, m)?)?;
    m.add_function(wrap_pyfunction!(ar1_inputs, m)?)?;
    m.add_function(wrap_pyfunction!(prefill, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(identity_transform, m)?)?;
    m.add_function(wrap_pyfunction!(hadamard_transform, m)?)?;
    m.add_function(wrap_pyfunction!(pca_transform, m)?)?;
    m.add_function(wrap_pyfunction!(collect_latent_features, m)?)?;
    m.add_function(wrap_pyfunction!(transform_weights, m)?)?;
    m.add_function(wrap_pyfunction!(sharded_decode, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(kv_cache_per_token, m)?)?;
    m.add_function(wrap_pyfunction!(cost_summary, m)?)?;
    m.add_function(wrap_pyfunction!(verify_all, m)?)?;
    Ok(())
}
