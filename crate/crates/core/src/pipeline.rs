//! End-to-end decode pipelines and divergence measurement.
//!
//! Three variants run over identical prompts and one shared weight set:
//!
//! - **mla_only** — the single-device reference: exact prefill, exact
//!   decode. Every error series is measured against this run.
//! - **tpla_full** — sharded from the first token: the prompt is consumed
//!   by sliced decode steps, then decoding continues sliced.
//! - **tpla_pd_sep** — prefill/decode separation: the prompt is prefetched
//!   by the exact single-device path (bitwise identical to the reference
//!   prefill), the latent cache is column-sliced and handed to the devices,
//!   and only decoding runs sliced.
//!
//! Because desk-scale models are not language models, "accuracy" here is
//! the relative L2 distance between a variant's decode outputs and the
//! reference outputs, reported per step and summarized by median / 95th
//! percentile. Two feeding disciplines are provided: closed loop (each
//! variant consumes its own previous output, so per-step errors compound)
//! and teacher forcing (every variant consumes the reference outputs, which
//! isolates single-step slicing error).

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mla::{absorb, mla_decode_step, mla_prefill, WeightSet};
use crate::numerics::matrix::rel_l2;
use crate::reparam::{apply_transform, OrthogonalTransform};
use crate::shard::{
    build_shards, cache_handoff, make_plan, sharded_decode_step, CollectiveStats, Exactness,
    ShardCache, ShardMode, ShardPlan,
};
use crate::verify::{median, percentile};
use crate::Matrix;

/// How decode inputs are chosen after the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedMode {
    /// Each variant feeds its own previous output forward; slicing errors
    /// accumulate across steps.
    ClosedLoop,
    /// Every variant feeds the reference outputs; errors are per-step only.
    TeacherForced,
}

impl std::str::FromStr for FeedMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_loop" => Ok(FeedMode::ClosedLoop),
            "teacher_forced" => Ok(FeedMode::TeacherForced),
            other => Err(Error::arg(
                "FeedMode::from_str",
                format!("unknown feed mode '{other}' (closed_loop, teacher_forced)"),
            )),
        }
    }
}

impl std::fmt::Display for FeedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeedMode::ClosedLoop => "closed_loop",
            FeedMode::TeacherForced => "teacher_forced",
        })
    }
}

/// One sharded variant's outputs and its per-step divergence from the
/// reference decode outputs.
#[derive(Debug, Clone)]
pub struct VariantSeries {
    /// Decode outputs, one row per step.
    pub outputs: Matrix,
    /// Relative L2 error vs. the reference, one entry per step.
    pub errors: Vec<f64>,
    /// Simulated communication for the whole run (prompt + decode).
    pub stats: CollectiveStats,
}

impl VariantSeries {
    /// Mean per-step error; the scalar used when one run must be one number.
    pub fn mean_error(&self) -> f64 {
        if self.errors.is_empty() {
            0.0
        } else {
            self.errors.iter().sum::<f64>() / self.errors.len() as f64
        }
    }
}

/// A complete three-variant comparison over one prompt.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub prompt_len: usize,
    pub steps: usize,
    pub feed: FeedMode,
    pub exactness: Exactness,
    /// Reference prefill outputs, one row per prompt token.
    pub oracle_prefill: Matrix,
    /// Prefill outputs of the pd-separated variant (same exact path; kept
    /// so the bitwise-equality claim is checked against real artifacts).
    pub pd_prefill: Matrix,
    /// Reference decode outputs, one row per step.
    pub oracle_outputs: Matrix,
    pub tpla_full: VariantSeries,
    pub tpla_pd_sep: VariantSeries,
}

/// Five-number-free summary of an error series.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub median: f64,
    pub p95: f64,
    pub last: f64,
    pub mean: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Self {
        let last = errors.last().copied().unwrap_or(0.0);
        let mean = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        ErrorSummary {
            median: median(errors),
            p95: percentile(errors, 0.95),
            last,
            mean,
        }
    }
}

/// Serializable digest of a [`PipelineRun`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: ModelConfig,
    pub transform_kind: String,
    pub plan_devices: usize,
    pub plan_groups: usize,
    pub plan_mode: ShardMode,
    pub exactness: Exactness,
    pub feed: FeedMode,
    pub prompt_len: usize,
    pub steps: usize,
    pub pd_prefill_bitwise_equal: bool,
    pub tpla_full_errors: Vec<f64>,
    pub tpla_pd_sep_errors: Vec<f64>,
    pub tpla_full_summary: ErrorSummary,
    pub tpla_pd_sep_summary: ErrorSummary,
    pub tpla_full_collectives: CollectiveStats,
    pub tpla_pd_sep_collectives: CollectiveStats,
}

impl PipelineRun {
    pub fn report(
        &self,
        cfg: &ModelConfig,
        transform: &OrthogonalTransform,
        plan: &ShardPlan,
    ) -> PipelineReport {
        PipelineReport {
            config: cfg.clone(),
            transform_kind: transform.kind().to_string(),
            plan_devices: plan.devices,
            plan_groups: plan.groups,
            plan_mode: plan.mode,
            exactness: self.exactness,
            feed: self.feed,
            prompt_len: self.prompt_len,
            steps: self.steps,
            pd_prefill_bitwise_equal: self.oracle_prefill == self.pd_prefill,
            tpla_full_errors: self.tpla_full.errors.clone(),
            tpla_pd_sep_errors: self.tpla_pd_sep.errors.clone(),
            tpla_full_summary: ErrorSummary::of(&self.tpla_full.errors),
            tpla_pd_sep_summary: ErrorSummary::of(&self.tpla_pd_sep.errors),
            tpla_full_collectives: self.tpla_full.stats,
            tpla_pd_sep_collectives: self.tpla_pd_sep.stats,
        }
    }
}

/// Runs the three-variant comparison.
///
/// The transform is applied to the weights once, and all variants share the
/// result, so differences measure sharding alone, never reparameterization.
/// The first decode input of a closed-loop variant is its own output for
/// the final prompt token (pd-separated variants inherit the reference's,
/// since their prefill *is* the reference prefill).
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    cfg: &ModelConfig,
    w: &WeightSet,
    transform: &OrthogonalTransform,
    plan: &ShardPlan,
    exactness: Exactness,
    prompt: &Matrix,
    steps: usize,
    feed: FeedMode,
) -> Result<PipelineRun> {
    if steps == 0 {
        return Err(Error::arg("run_pipeline", "decode step count must be positive".to_string()));
    }
    if prompt.rows() == 0 {
        return Err(Error::arg("run_pipeline", "prompt must be nonempty".to_string()));
    }
    if prompt.cols() != cfg.hidden_dim {
        return Err(Error::shape(
            "run_pipeline",
            format!("prompt is {}x{}, hidden_dim is {}", prompt.rows(), prompt.cols(), cfg.hidden_dim),
        ));
    }
    if plan.mode != ShardMode::Tpla {
        return Err(Error::UnsupportedPlan {
            op: "run_pipeline",
            detail: format!("pipeline variants are defined for tpla plans, got {}", plan.mode),
        });
    }
    if transform.dim() != cfg.latent_dim {
        return Err(Error::shape(
            "run_pipeline",
            format!("transform dim {} != latent_dim {}", transform.dim(), cfg.latent_dim),
        ));
    }

    let w_rot = apply_transform(cfg, w, transform)?;
    let scales = transform.scales();
    let shards = build_shards(cfg, &w_rot, plan, Some(&scales))?;
    let aw = absorb(cfg, &w_rot)?;

    // Reference: exact prefill + exact decode, feeding its own outputs.
    let (oracle_prefill, mut oracle_cache) = mla_prefill(cfg, &w_rot, prompt)?;
    let mut oracle_outputs = Matrix::zeros(0, cfg.hidden_dim);
    {
        let mut input = oracle_prefill.slice_rows(prompt.rows() - 1, prompt.rows())?;
        for _ in 0..steps {
            let y = mla_decode_step(cfg, &w_rot, &aw, &input, &mut oracle_cache)?;
            oracle_outputs.push_row(y.row(0))?;
            input = y;
        }
    }

    // Fully sharded: the prompt itself is consumed by sliced decode steps.
    let tpla_full = {
        let mut caches: Vec<ShardCache> = shards.iter().map(ShardCache::empty).collect();
        let mut stats = CollectiveStats::default();
        let mut last_prompt_out = Matrix::zeros(1, cfg.hidden_dim);
        for t in 0..prompt.rows() {
            let x_t = prompt.slice_rows(t, t + 1)?;
            last_prompt_out =
                sharded_decode_step(cfg, plan, &shards, &mut caches, &x_t, exactness, &mut stats)?;
        }
        run_decode(
            cfg, plan, &shards, caches, exactness, feed, steps, &last_prompt_out,
            &oracle_prefill, &oracle_outputs, stats,
        )?
    };

    // Prefill/decode separation: exact prefill, sliced continuation.
    let (pd_prefill, pd_cache) = mla_prefill(cfg, &w_rot, prompt)?;
    let tpla_pd_sep = {
        let caches = cache_handoff(&pd_cache, plan, &shards)?;
        let stats = CollectiveStats::default();
        let last_prompt_out = pd_prefill.slice_rows(prompt.rows() - 1, prompt.rows())?;
        run_decode(
            cfg, plan, &shards, caches, exactness, feed, steps, &last_prompt_out,
            &oracle_prefill, &oracle_outputs, stats,
        )?
    };

    Ok(PipelineRun {
        prompt_len: prompt.rows(),
        steps,
        feed,
        exactness,
        oracle_prefill,
        pd_prefill,
        oracle_outputs,
        tpla_full,
        tpla_pd_sep,
    })
}

/// Decode phase shared by both sharded variants.
#[allow(clippy::too_many_arguments)]
fn run_decode(
    cfg: &ModelConfig,
    plan: &ShardPlan,
    shards: &[crate::shard::DeviceShard],
    mut caches: Vec<ShardCache>,
    exactness: Exactness,
    feed: FeedMode,
    steps: usize,
    own_prompt_out: &Matrix,
    oracle_prefill: &Matrix,
    oracle_outputs: &Matrix,
    mut stats: CollectiveStats,
) -> Result<VariantSeries> {
    let mut outputs = Matrix::zeros(0, cfg.hidden_dim);
    let mut errors = Vec::with_capacity(steps);
    let mut input = match feed {
        FeedMode::ClosedLoop => own_prompt_out.clone(),
        FeedMode::TeacherForced => {
            oracle_prefill.slice_rows(oracle_prefill.rows() - 1, oracle_prefill.rows())?
        }
    };
    for t in 0..steps {
        let y = sharded_decode_step(cfg, plan, shards, &mut caches, &input, exactness, &mut stats)?;
        errors.push(rel_l2(y.row(0), oracle_outputs.row(t)));
        outputs.push_row(y.row(0))?;
        input = match feed {
            FeedMode::ClosedLoop => y,
            FeedMode::TeacherForced => oracle_outputs.slice_rows(t, t + 1)?,
        };
    }
    Ok(VariantSeries {
        outputs,
        errors,
        stats,
    })
}

/// Convenience: builds the plan and runs the pipeline in one call.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline_with_plan(
    cfg: &ModelConfig,
    w: &WeightSet,
    transform: &OrthogonalTransform,
    devices: usize,
    groups: usize,
    exactness: Exactness,
    prompt: &Matrix,
    steps: usize,
    feed: FeedMode,
) -> Result<(PipelineRun, ShardPlan)> {
    let plan = make_plan(cfg, devices, groups, ShardMode::Tpla)?;
    let run = run_pipeline(cfg, w, transform, &plan, exactness, prompt, steps, feed)?;
    Ok((run, plan))
}
