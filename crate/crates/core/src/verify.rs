//! Named self-check suites and the small statistics toolbox they share.
//!
//! Each suite runs a list of independent checks and reports one
//! [`CheckResult`] per check — name, verdict, and a human-readable detail
//! line with the measured quantity. The CLI `verify` subcommand executes
//! these suites and turns "any check failed" into its exit status; the
//! acceptance tests reuse the statistics helpers.
//!
//! Everything here is deterministic given the seed parameters.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::container::{transform_to_container, Container};
use crate::cost::{
    decode_step_flops, kv_per_token, predict_ratios, AttentionMode, DeploymentSpec,
};
use crate::error::Result;
use crate::mla::{absorb, absorb_gamma, init_weights, mla_decode_step, mla_prefill};
use crate::numerics::{rms, softmax_in_place};
use crate::pipeline::{run_pipeline, FeedMode};
use crate::reparam::{
    apply_transform, build_hadamard, build_pca, random_orthogonal, OrthogonalTransform,
};
use crate::shard::{
    build_shards, cache_handoff, gla_view_decode_step, make_plan, sharded_decode_step,
    tpla_as_gla_view, CollectiveStats, Exactness, ShardCache, ShardMode,
};
use crate::synth::{collect_latents, init_anisotropic_weights};
use crate::{Matrix, SeededRng};

// --- Statistics helpers -------------------------------------------------------

/// Median of a sample (average of the middle pair for even sizes; 0 for an
/// empty slice).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN samples"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nearest-rank percentile: the smallest sample at rank `ceil(q * n)`.
/// `q` is a fraction in [0, 1]; 0 returns the minimum, 1 the maximum.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN samples"));
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Exact one-sided binomial tail `P(X >= wins)` for `X ~ Binomial(trials,
/// 1/2)` — the null distribution of the paired sign test.
pub fn sign_test_p_value(wins: usize, trials: usize) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    // pmf(0) = 0.5^trials, pmf(i+1) = pmf(i) * (n - i) / (i + 1).
    let mut pmf = 0.5f64.powi(trials as i32);
    let mut tail = if wins == 0 { pmf } else { 0.0 };
    for i in 0..trials {
        pmf *= (trials - i) as f64 / (i + 1) as f64;
        if i + 1 >= wins {
            tail += pmf;
        }
    }
    tail.min(1.0)
}

/// Outcome of a paired one-sided sign test of "a is smaller than b".
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where `a < b`.
    pub wins: usize,
    /// Pairs where `a > b`.
    pub losses: usize,
    /// Exactly equal pairs (dropped, per standard practice).
    pub ties: usize,
    /// `P(X >= wins)` under the fair-coin null on `wins + losses` trials.
    pub p_value: f64,
}

impl SignTest {
    /// True when the null "medians equal" is rejected toward `a < b` at
    /// level `alpha`.
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

/// Paired sign test that `a`'s entries are smaller than `b`'s.
pub fn sign_test_less(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "sign test needs paired samples");
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            wins += 1;
        } else if x > y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    SignTest {
        wins,
        losses,
        ties,
        p_value: sign_test_p_value(wins, wins + losses),
    }
}

// --- Check plumbing ------------------------------------------------------------

/// One named check's verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// A suite of checks under one heading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Runs a fallible check body; an `Err` becomes a failed check with the
/// error text as its detail.
fn run_check(
    checks: &mut Vec<CheckResult>,
    name: &str,
    body: impl FnOnce() -> Result<(bool, String)>,
) {
    let (passed, detail) = match body() {
        Ok((passed, detail)) => (passed, detail),
        Err(e) => (false, format!("errored: {e}")),
    };
    checks.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

// --- Suites ----------------------------------------------------------------------

/// Numerical kernels: softmax normalization, RMS oracle, deterministic RNG.
pub fn numerics_suite(seed: u64) -> SuiteReport {
    let mut checks = Vec::new();

    run_check(&mut checks, "softmax_rows_sum_to_one", || {
        let mut rng = SeededRng::new(seed);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let mut row: Vec<f64> = (0..17).map(|_| 4.0 * rng.next_gaussian()).collect();
            row[3] = f64::NEG_INFINITY; // masked entry
            softmax_in_place(&mut row);
            let sum: f64 = row.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            if row[3] != 0.0 {
                return Ok((false, "masked entry kept weight".to_string()));
            }
        }
        Ok((worst <= 1e-12, format!("max |sum-1| = {worst:.3e}")))
    });

    run_check(&mut checks, "rms_matches_closed_form", || {
        let got = rms(&[3.0, 4.0], 0.0)?;
        let want = 12.5f64.sqrt();
        Ok(((got - want).abs() < 1e-15, format!("rms([3,4]) = {got}")))
    });

    run_check(&mut checks, "rng_reproducible", || {
        let a: Vec<u64> = {
            let mut r = SeededRng::new(seed);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = SeededRng::new(seed);
            (0..8).map(|_| r.next_u64()).collect()
        };
        Ok((a == b, "two streams from one seed".to_string()))
    });

    SuiteReport {
        suite: "numerics".to_string(),
        checks,
    }
}

/// Reference-path identities: decode vs prefill, absorption, gain folding.
pub fn reference_suite(cfg: &ModelConfig, seed: u64) -> SuiteReport {
    let mut checks = Vec::new();

    run_check(&mut checks, "decode_matches_prefill", || {
        let mut rng = SeededRng::new(seed);
        let w = init_weights(cfg, &mut rng, 1.0)?;
        let x = rng.gaussian_matrix(7, cfg.hidden_dim, 1.0);
        let (want, _) = mla_prefill(cfg, &w, &x)?;
        let aw = absorb(cfg, &w)?;
        let mut cache = crate::mla::LatentCache::empty(cfg);
        let mut worst = 0.0f64;
        for t in 0..x.rows() {
            let x_t = x.slice_rows(t, t + 1)?;
            let y = mla_decode_step(cfg, &w, &aw, &x_t, &mut cache)?;
            worst = worst.max(
                y.max_abs_diff(&want.slice_rows(t, t + 1)?)?,
            );
        }
        Ok((worst <= 1e-9, format!("max row diff {worst:.3e}")))
    });

    run_check(&mut checks, "gamma_folding_is_exact", || {
        let mut rng = SeededRng::new(seed ^ 0xabcd);
        let mut w = init_weights(cfg, &mut rng, 1.0)?;
        w.perturb_gamma(&mut rng, 0.5);
        let x = rng.gaussian_matrix(5, cfg.hidden_dim, 1.0);
        let (before, _) = mla_prefill(cfg, &w, &x)?;
        let folded = absorb_gamma(cfg, &w)?;
        let (after, _) = mla_prefill(cfg, &folded, &x)?;
        let diff = before.max_abs_diff(&after)?;
        Ok((diff <= 1e-10, format!("max diff {diff:.3e}")))
    });

    SuiteReport {
        suite: "reference".to_string(),
        checks,
    }
}

/// Reparameterization invariance for every transform kind.
pub fn transform_suite(cfg: &ModelConfig, seed: u64) -> SuiteReport {
    let mut checks = Vec::new();
    let groups = 2;

    let invariance = |t: &OrthogonalTransform, seed: u64| -> Result<(bool, String)> {
        let mut rng = SeededRng::new(seed);
        let mut w = init_weights(cfg, &mut rng, 1.0)?;
        w.perturb_gamma(&mut rng, 0.3);
        let x = rng.gaussian_matrix(6, cfg.hidden_dim, 1.0);
        let (before, _) = mla_prefill(cfg, &w, &x)?;
        let w_rot = apply_transform(cfg, &w, t)?;
        let (after, _) = mla_prefill(cfg, &w_rot, &x)?;
        let diff = before.max_abs_diff(&after)?;
        Ok((diff <= 1e-9, format!("max output diff {diff:.3e}")))
    };

    run_check(&mut checks, "identity_transform_invariance", || {
        let t = OrthogonalTransform::identity(cfg.latent_dim, groups)?;
        invariance(&t, seed)
    });

    run_check(&mut checks, "hadamard_transform_invariance", || {
        let mut rng = SeededRng::new(seed ^ 1);
        let t = build_hadamard(cfg.latent_dim, groups, &mut rng, true)?;
        invariance(&t, seed ^ 2)
    });

    run_check(&mut checks, "pca_transform_invariance", || {
        let mut rng = SeededRng::new(seed ^ 3);
        let w = init_anisotropic_weights(cfg, &mut rng, 1.0, 0.85, true)?;
        let cal = collect_latents(cfg, &w, &mut rng, 256)?;
        let pca = build_pca(&cal, groups, false)?;
        invariance(&pca.transform, seed ^ 4)
    });

    run_check(&mut checks, "random_orthogonal_invariance", || {
        let mut rng = SeededRng::new(seed ^ 5);
        let u = random_orthogonal(cfg.latent_dim, &mut rng);
        let t = OrthogonalTransform::new(
            u,
            crate::reparam::TransformKind::Identity,
            groups,
            vec![groups as f64; groups],
            vec![groups as f64; groups],
        )?;
        invariance(&t, seed ^ 6)
    });

    run_check(&mut checks, "built_transforms_are_orthogonal", || {
        let mut rng = SeededRng::new(seed ^ 7);
        let h = build_hadamard(cfg.latent_dim, groups, &mut rng, true)?;
        let w = init_anisotropic_weights(cfg, &mut rng, 1.0, 0.85, false)?;
        let cal = collect_latents(cfg, &w, &mut rng, 256)?;
        let p = build_pca(&cal, groups, false)?;
        let worst = h.orthogonality_error().max(p.transform.orthogonality_error());
        Ok((worst <= 1e-10, format!("max |UUt - I| = {worst:.3e}")))
    });

    SuiteReport {
        suite: "transform".to_string(),
        checks,
    }
}

/// Validates one transform loaded from a file (or built elsewhere): the
/// negative-control path for deliberately corrupted containers.
pub fn transform_file_suite(t: &OrthogonalTransform) -> SuiteReport {
    let mut checks = Vec::new();

    run_check(&mut checks, "transform_is_orthogonal", || {
        let err = t.orthogonality_error();
        Ok((err <= 1e-10, format!("|UUt - I| = {err:.3e}")))
    });

    run_check(&mut checks, "slice_constants_are_sane", || {
        let s = t.scales();
        match s.validate() {
            Ok(()) => Ok((true, format!("rms scales {:?}", s.rms))),
            Err(e) => Ok((false, format!("{e}"))),
        }
    });

    run_check(&mut checks, "groups_divide_dimension", || {
        let ok = t.dim().is_multiple_of(t.group_count());
        Ok((ok, format!("dim {} / groups {}", t.dim(), t.group_count())))
    });

    SuiteReport {
        suite: "transform-file".to_string(),
        checks,
    }
}

/// Sharded-execution identities: exact-mode equivalence, the duplicated-head
/// view, collective accounting, determinism, handoff.
pub fn shard_suite(cfg: &ModelConfig, seed: u64) -> SuiteReport {
    let mut checks = Vec::new();

    let reference = |seed: u64, rows: usize| -> Result<(Matrix, Matrix, crate::mla::WeightSet)> {
        let mut rng = SeededRng::new(seed);
        let w = init_weights(cfg, &mut rng, 1.0)?;
        let x = rng.gaussian_matrix(rows, cfg.hidden_dim, 1.0);
        let aw = absorb(cfg, &w)?;
        let mut cache = crate::mla::LatentCache::empty(cfg);
        let mut out = Matrix::zeros(0, cfg.hidden_dim);
        for t in 0..x.rows() {
            let x_t = x.slice_rows(t, t + 1)?;
            let y = mla_decode_step(cfg, &w, &aw, &x_t, &mut cache)?;
            out.push_row(y.row(0))?;
        }
        Ok((x, out, w))
    };

    run_check(&mut checks, "exact_both_equals_reference", || {
        let (x, want, w) = reference(seed, 6)?;
        let mut worst = 0.0f64;
        for (k, g) in [(2, 2), (4, 2)] {
            let plan = make_plan(cfg, k, g, ShardMode::Tpla)?;
            let scales = crate::reparam::SliceScales::uniform(g)?;
            let shards = build_shards(cfg, &w, &plan, Some(&scales))?;
            let mut caches: Vec<ShardCache> = shards.iter().map(ShardCache::empty).collect();
            let mut stats = CollectiveStats::default();
            for t in 0..x.rows() {
                let x_t = x.slice_rows(t, t + 1)?;
                let y = sharded_decode_step(
                    cfg, &plan, &shards, &mut caches, &x_t, Exactness::ExactBoth, &mut stats,
                )?;
                worst = worst.max(y.max_abs_diff(&want.slice_rows(t, t + 1)?)?);
            }
        }
        Ok((worst <= 1e-9, format!("max diff {worst:.3e} over plans (2,2),(4,2)")))
    });

    run_check(&mut checks, "duplicated_head_view_is_bitwise", || {
        let mut rng = SeededRng::new(seed ^ 0x11);
        let w = init_weights(cfg, &mut rng, 1.0)?;
        let x = rng.gaussian_matrix(5, cfg.hidden_dim, 1.0);
        let plan = make_plan(cfg, 2, 2, ShardMode::Tpla)?;
        let scales = crate::reparam::SliceScales::uniform(2)?;
        let shards = build_shards(cfg, &w, &plan, Some(&scales))?;
        let view = tpla_as_gla_view(&plan, &shards)?;
        let mut ca: Vec<ShardCache> = shards.iter().map(ShardCache::empty).collect();
        let mut cb: Vec<ShardCache> = view.shards.iter().map(ShardCache::empty).collect();
        for t in 0..x.rows() {
            let x_t = x.slice_rows(t, t + 1)?;
            let mut s1 = CollectiveStats::default();
            let mut s2 = CollectiveStats::default();
            let a = crate::shard::tpla_decode_step(
                cfg, &plan, &shards, &mut ca, &x_t, Exactness::Sliced, &mut s1,
            )?;
            let b = gla_view_decode_step(cfg, &view, &mut cb, &x_t, Exactness::Sliced, &mut s2)?;
            if a != b {
                return Ok((false, format!("outputs diverged at step {t}")));
            }
        }
        Ok((true, "5 steps bitwise identical".to_string()))
    });

    run_check(&mut checks, "sliced_collectives_one_allreduce_per_step", || {
        let mut rng = SeededRng::new(seed ^ 0x22);
        let w = init_weights(cfg, &mut rng, 1.0)?;
        let x = rng.gaussian_matrix(4, cfg.hidden_dim, 1.0);
        let plan = make_plan(cfg, 2, 2, ShardMode::Tpla)?;
        let scales = crate::reparam::SliceScales::uniform(2)?;
        let shards = build_shards(cfg, &w, &plan, Some(&scales))?;
        let mut caches: Vec<ShardCache> = shards.iter().map(ShardCache::empty).collect();
        let mut stats = CollectiveStats::default();
        for t in 0..x.rows() {
            let x_t = x.slice_rows(t, t + 1)?;
            sharded_decode_step(cfg, &plan, &shards, &mut caches, &x_t, Exactness::Sliced, &mut stats)?;
        }
        let ok = stats.allreduce_calls == 4 && stats.allreduce_elems == 4 * cfg.hidden_dim as u64;
        Ok((ok, format!("{} calls, {} elems over 4 steps", stats.allreduce_calls, stats.allreduce_elems)))
    });

    run_check(&mut checks, "runs_are_deterministic", || {
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut rng = SeededRng::new(seed ^ 0x33);
            let w = init_weights(cfg, &mut rng, 1.0)?;
            let x = rng.gaussian_matrix(4, cfg.hidden_dim, 1.0);
            let plan = make_plan(cfg, 4, 2, ShardMode::Tpla)?;
            let scales = crate::reparam::SliceScales::uniform(2)?;
            let shards = build_shards(cfg, &w, &plan, Some(&scales))?;
            let mut caches: Vec<ShardCache> = shards.iter().map(ShardCache::empty).collect();
            let mut stats = CollectiveStats::default();
            let mut out = Matrix::zeros(0, cfg.hidden_dim);
            for t in 0..x.rows() {
                let x_t = x.slice_rows(t, t + 1)?;
                let y = sharded_decode_step(
                    cfg, &plan, &shards, &mut caches, &x_t, Exactness::Sliced, &mut stats,
                )?;
                out.push_row(y.row(0))?;
            }
            outs.push(out);
        }
        Ok((outs[0] == outs[1], "two identical reruns".to_string()))
    });

    run_check(&mut checks, "handoff_is_lossless", || {
        let mut rng = SeededRng::new(seed ^ 0x44);
        let w = init_weights(cfg, &mut rng, 1.0)?;
        let x = rng.gaussian_matrix(6, cfg.hidden_dim, 1.0);
        let (_, cache) = mla_prefill(cfg, &w, &x)?;
        let plan = make_plan(cfg, 2, 2, ShardMode::Tpla)?;
        let scales = crate::reparam::SliceScales::uniform(2)?;
        let shards = build_shards(cfg, &w, &plan, Some(&scales))?;
        let handed = cache_handoff(&cache, &plan, &shards)?;
        let rejoined = Matrix::concat_cols(&[handed[0].latents(), handed[1].latents()])?;
        let ok = &rejoined == cache.latents()
            && handed.iter().all(|h| h.rope_keys() == cache.rope_keys());
        Ok((ok, "slices re-concatenate to the original cache".to_string()))
    });

    SuiteReport {
        suite: "shard".to_string(),
        checks,
    }
}

/// End-to-end pipeline sanity at exact and sliced settings.
pub fn pipeline_suite(cfg: &ModelConfig, seed: u64) -> SuiteReport {
    let mut checks = Vec::new();

    run_check(&mut checks, "exact_mode_zero_error_series", || {
        let mut rng = SeededRng::new(seed);
        let w = init_weights(cfg, &mut rng, 1.0)?;
        let t = build_hadamard(cfg.latent_dim, 2, &mut rng, true)?;
        let plan = make_plan(cfg, 2, 2, ShardMode::Tpla)?;
        let prompt = rng.gaussian_matrix(4, cfg.hidden_dim, 1.0);
        let run = run_pipeline(
            cfg, &w, &t, &plan, Exactness::ExactBoth, &prompt, 5, FeedMode::ClosedLoop,
        )?;
        let worst = run
            .tpla_full
            .errors
            .iter()
            .chain(&run.tpla_pd_sep.errors)
            .fold(0.0f64, |a, &b| a.max(b));
        Ok((worst <= 1e-9, format!("max error {worst:.3e}")))
    });

    run_check(&mut checks, "pd_prefill_bitwise_equals_reference", || {
        let mut rng = SeededRng::new(seed ^ 0x55);
        let w = init_weights(cfg, &mut rng, 1.0)?;
        let t = build_hadamard(cfg.latent_dim, 2, &mut rng, true)?;
        let plan = make_plan(cfg, 2, 2, ShardMode::Tpla)?;
        let prompt = rng.gaussian_matrix(5, cfg.hidden_dim, 1.0);
        let run = run_pipeline(
            cfg, &w, &t, &plan, Exactness::Sliced, &prompt, 4, FeedMode::ClosedLoop,
        )?;
        Ok((run.oracle_prefill == run.pd_prefill, "prefill rows identical".to_string()))
    });

    SuiteReport {
        suite: "pipeline".to_string(),
        checks,
    }
}

/// Dimension arithmetic and FLOP-equivalence checks of the cost model.
pub fn cost_suite() -> SuiteReport {
    let mut checks = Vec::new();

    let spec = |config: ModelConfig, mode: AttentionMode, k: usize, g: usize| DeploymentSpec {
        config,
        mode,
        devices: k,
        groups: g,
        context_len: 32_768,
        query_len: 4096,
        batch: 1,
        bytes_per_element: 2,
        bandwidth_bytes_per_s: 3.35e12,
        compute_flops_per_s: 9.9e14,
    };

    run_check(&mut checks, "kv_per_token_dimension_arithmetic", || {
        let dsv3 = ModelConfig::dsv3_dims();
        let mla = kv_per_token(&spec(dsv3.clone(), AttentionMode::Mla, 2, 1))?.elements;
        let tpla = kv_per_token(&spec(dsv3, AttentionMode::Tpla, 2, 2))?.elements;
        let gqa_cfg = ModelConfig::new(8192, 64, 128, 128, 512, 1536, 1e-6)?;
        let gqa1 = kv_per_token(&spec(gqa_cfg.clone(), AttentionMode::Gqa { kv_heads: 8 }, 1, 1))?
            .elements;
        let gqa4 =
            kv_per_token(&spec(gqa_cfg, AttentionMode::Gqa { kv_heads: 8 }, 4, 1))?.elements;
        let ok = mla == 576 && tpla == 320 && gqa1 == 2048 && gqa4 == 512;
        Ok((ok, format!("mla {mla}, tpla {tpla}, gqa {gqa1}/{gqa4}")))
    });

    run_check(&mut checks, "decode_byte_ratio_near_measured", || {
        let dsv3 = ModelConfig::dsv3_dims();
        let r = predict_ratios(
            &spec(dsv3.clone(), AttentionMode::Tpla, 2, 2),
            &spec(dsv3, AttentionMode::Mla, 2, 1),
        )?;
        let ratio = r.decode_throughput_ratio;
        let ok = (ratio - 1.8).abs() < 1e-12 && (ratio / 1.79 - 1.0).abs() < 0.006;
        Ok((ok, format!("ratio {ratio}")))
    });

    run_check(&mut checks, "nope_flops_match_across_layouts", || {
        for h_q in [4, 8, 128] {
            for d_h in [8, 64, 128] {
                for s in [128usize, 4096, 32_768] {
                    let cfg = ModelConfig::new(1024, h_q, d_h, 64, 4 * d_h, 512, 1e-6)?;
                    let mut a = spec(cfg.clone(), AttentionMode::Tpla, 2, 2);
                    a.context_len = s;
                    let mut b = spec(cfg, AttentionMode::Mla, 2, 1);
                    b.context_len = s;
                    if decode_step_flops(&a)?.nope_path() != decode_step_flops(&b)?.nope_path() {
                        return Ok((false, format!("mismatch at h={h_q} d={d_h} s={s}")));
                    }
                }
            }
        }
        Ok((true, "27 grid points, exact integer equality".to_string()))
    });

    SuiteReport {
        suite: "cost".to_string(),
        checks,
    }
}

/// Every suite, in a fixed order.
pub fn run_all_suites(cfg: &ModelConfig, seed: u64) -> Vec<SuiteReport> {
    vec![
        numerics_suite(seed),
        reference_suite(cfg, seed),
        transform_suite(cfg, seed),
        shard_suite(cfg, seed),
        pipeline_suite(cfg, seed),
        cost_suite(),
    ]
}

/// Content hash of a transform (provenance lines in reports).
pub fn transform_hash(t: &OrthogonalTransform) -> Result<String> {
    transform_to_container(t, &[])?.content_hash()
}

/// Content hash of any container.
pub fn container_hash(c: &Container) -> Result<String> {
    c.content_hash()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_percentile_basics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&xs, 0.95), 95.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 1.0), 100.0);
    }

    #[test]
    fn sign_test_tail_matches_hand_computed_values() {
        // n=5: P(X >= 4) = (5 + 1) / 32.
        assert!((sign_test_p_value(4, 5) - 6.0 / 32.0).abs() < 1e-12);
        // P(X >= 0) = 1.
        assert!((sign_test_p_value(0, 7) - 1.0).abs() < 1e-12);
        // P(X >= n) = 0.5^n.
        assert!((sign_test_p_value(10, 10) - 0.5f64.powi(10)).abs() < 1e-15);
        assert_eq!(sign_test_p_value(0, 0), 1.0);
    }

    #[test]
    fn sign_test_needs_59_wins_at_100_trials() {
        // The smallest win count whose one-sided tail drops to 0.05 or less
        // with 100 effective pairs.
        assert!(sign_test_p_value(59, 100) <= 0.05);
        assert!(sign_test_p_value(58, 100) > 0.05);
    }

    #[test]
    fn sign_test_counts_wins_losses_ties() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 3.0, 3.0, 3.0];
        let t = sign_test_less(&a, &b);
        assert_eq!(t.wins, 2);
        assert_eq!(t.losses, 1);
        assert_eq!(t.ties, 1);
        assert!((t.p_value - sign_test_p_value(2, 3)).abs() < 1e-15);
    }

    #[test]
    fn all_suites_pass_on_the_toy_preset() {
        let cfg = ModelConfig::toy();
        for suite in run_all_suites(&cfg, 12345) {
            assert!(
                suite.passed(),
                "suite '{}' failed: {:?}",
                suite.suite,
                suite.failures()
            );
        }
    }

    #[test]
    fn corrupted_transform_fails_its_file_suite() {
        let mut rng = SeededRng::new(8);
        let t = build_hadamard(8, 2, &mut rng, false).unwrap();
        assert!(transform_file_suite(&t).passed());
        // Corrupt the first element of `u` (the first tensor after the
        // header) through the container round trip and re-load it.
        let mut bytes = transform_to_container(&t, &[]).unwrap().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        bytes[8 + hlen + 7] ^= 0x3f;
        let c = Container::from_bytes(&bytes).unwrap();
        let broken = crate::container::transform_from_container(&c).unwrap();
        let report = transform_file_suite(&broken);
        assert!(!report.passed());
        assert!(report.failures().iter().any(|f| f.name == "transform_is_orthogonal"));
    }

    #[test]
    fn suite_reports_serialize() {
        let report = cost_suite();
        let json = serde_json::to_string(&report).unwrap();
        let back: SuiteReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.suite, "cost");
        assert!(back.passed());
    }
}
