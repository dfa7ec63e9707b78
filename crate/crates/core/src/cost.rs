//! Analytical per-device cost accounting: KV-cache footprint, attention
//! FLOPs, collective traffic, and throughput/latency ratio predictions.
//!
//! The model is static arithmetic — no queueing, no kernel-launch or
//! overlap effects — so its outputs are dimension bookkeeping, not wall
//! clock. FLOPs are counted at 2 per multiply-add, and every count is an
//! exact integer (`u128`), which lets equivalence claims be checked as
//! integer equality rather than float closeness.
//!
//! Per-device conventions:
//!
//! - **mla** replicates the whole latent cache on each of the `k` devices
//!   and splits the query heads `k` ways.
//! - **tpla** stores `latent_dim / g` cache columns per device and runs
//!   `num_heads * g / k` heads per device (every group covers all heads).
//! - **gqa** is the conventional grouped-query reference: `2 *
//!   kv_heads * head_dim` cache elements per token, split `k` ways, plain
//!   per-head attention with no decoupled positional path.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Attention deployment style being costed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionMode {
    Mla,
    Tpla,
    Gqa { kv_heads: usize },
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionMode::Mla => f.write_str("mla"),
            AttentionMode::Tpla => f.write_str("tpla"),
            AttentionMode::Gqa { kv_heads } => write!(f, "gqa[{kv_heads}]"),
        }
    }
}

/// Everything the cost model needs about one deployment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeploymentSpec {
    pub config: ModelConfig,
    pub mode: AttentionMode,
    /// Tensor-parallel degree `k` (devices).
    pub devices: usize,
    /// Latent group count `g` (1 for mla/gqa).
    pub groups: usize,
    /// Cached context length `S_kv` a decode step attends over.
    pub context_len: usize,
    /// Query (prompt) length `L_q` for prefill accounting.
    pub query_len: usize,
    pub batch: usize,
    /// Cache element width in bytes (2 for fp16/bf16 deployments).
    pub bytes_per_element: usize,
    /// Device memory bandwidth, bytes per second.
    pub bandwidth_bytes_per_s: f64,
    /// Device compute rate, FLOPs per second.
    pub compute_flops_per_s: f64,
}

impl DeploymentSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let positive = [
            ("devices", self.devices),
            ("groups", self.groups),
            ("context_len", self.context_len),
            ("query_len", self.query_len),
            ("batch", self.batch),
            ("bytes_per_element", self.bytes_per_element),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.devices < self.groups {
            return Err(Error::InvalidConfig(format!(
                "devices ({}) must be >= groups ({})",
                self.devices, self.groups
            )));
        }
        let rates_valid = self.bandwidth_bytes_per_s.is_finite()
            && self.bandwidth_bytes_per_s > 0.0
            && self.compute_flops_per_s.is_finite()
            && self.compute_flops_per_s > 0.0;
        if !rates_valid {
            return Err(Error::InvalidConfig(
                "hardware rates must be positive and finite".to_string(),
            ));
        }
        match self.mode {
            AttentionMode::Mla | AttentionMode::Gqa { .. } => {
                if self.groups != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "{} does not slice the cache; groups must be 1, got {}",
                        self.mode, self.groups
                    )));
                }
            }
            AttentionMode::Tpla => {
                if !self.config.latent_dim.is_multiple_of(self.groups) {
                    return Err(Error::InvalidConfig(format!(
                        "groups ({}) must divide latent_dim ({})",
                        self.groups, self.config.latent_dim
                    )));
                }
                if !self.devices.is_multiple_of(self.groups) {
                    return Err(Error::InvalidConfig(format!(
                        "groups ({}) must divide devices ({})",
                        self.groups, self.devices
                    )));
                }
            }
        }
        if self.heads_per_device().is_err() {
            self.heads_per_device()?;
        }
        Ok(())
    }

    /// Query heads each device runs.
    pub fn heads_per_device(&self) -> Result<usize> {
        let h = self.config.num_heads;
        match self.mode {
            AttentionMode::Mla => {
                if !h.is_multiple_of(self.devices) {
                    return Err(Error::InvalidConfig(format!(
                        "devices ({}) must divide num_heads ({h})",
                        self.devices
                    )));
                }
                Ok(h / self.devices)
            }
            AttentionMode::Tpla => {
                let members = self.devices / self.groups;
                if !h.is_multiple_of(members) {
                    return Err(Error::InvalidConfig(format!(
                        "devices-per-group ({members}) must divide num_heads ({h})"
                    )));
                }
                Ok(h / members)
            }
            AttentionMode::Gqa { kv_heads } => {
                if !h.is_multiple_of(self.devices) || kv_heads % self.devices != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "devices ({}) must divide num_heads ({h}) and kv_heads ({kv_heads})",
                        self.devices
                    )));
                }
                Ok(h / self.devices)
            }
        }
    }

    /// Cached latent columns each device stores per token (the value-path
    /// width that attention reads).
    pub fn cache_width_per_device(&self) -> usize {
        match self.mode {
            AttentionMode::Mla => self.config.latent_dim,
            AttentionMode::Tpla => self.config.latent_dim / self.groups,
            AttentionMode::Gqa { kv_heads } => kv_heads / self.devices * self.config.head_dim,
        }
    }
}

/// Per-device KV-cache cost of one cached token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvPerToken {
    pub elements: usize,
    pub bytes: usize,
}

/// Per-device cache elements a single token occupies.
///
/// - mla: `rope_dim + latent_dim`, replicated on every device;
/// - tpla: `rope_dim + latent_dim / g` (the rotary key stays replicated);
/// - gqa: `2 * kv_heads * head_dim / k` (keys and values, heads split).
pub fn kv_per_token(spec: &DeploymentSpec) -> Result<KvPerToken> {
    spec.validate()?;
    let elements = match spec.mode {
        AttentionMode::Mla => spec.config.rope_dim + spec.config.latent_dim,
        AttentionMode::Tpla => spec.config.rope_dim + spec.config.latent_dim / spec.groups,
        AttentionMode::Gqa { kv_heads } => 2 * kv_heads * spec.config.head_dim / spec.devices,
    };
    Ok(KvPerToken {
        elements,
        bytes: elements * spec.bytes_per_element,
    })
}

/// Exact per-device FLOP counts for `l_q` query tokens attending a context
/// of `s_kv` cached tokens (2 FLOPs per multiply-add everywhere).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Query down-projection `D x q_rank` (replicated).
    pub proj_q_down: u128,
    /// Query up-projection for the local heads.
    pub proj_q_up: u128,
    /// Rotary query projection for the local heads.
    pub proj_q_rope: u128,
    /// Latent down-projection restricted to the local cache width.
    pub proj_kv: u128,
    /// Shared rotary key projection (replicated).
    pub proj_k_rope: u128,
    /// Absorbed query-to-latent maps for the local heads.
    pub absorb_q_map: u128,
    /// Non-positional logits: queries against cached latents.
    pub logits_nope: u128,
    /// Rotary logits: per-head rotary queries against the shared key.
    pub logits_rope: u128,
    /// Probability-weighted reduction over cached latents.
    pub attend_values: u128,
    /// Absorbed latent-to-output projection.
    pub proj_out: u128,
}

impl FlopBreakdown {
    /// The context-dependent non-positional work: logits plus value
    /// reduction. This is the quantity that is arithmetically identical
    /// between a head-split latent deployment and a latent-split one.
    pub fn nope_path(&self) -> u128 {
        self.logits_nope + self.attend_values
    }

    /// The context-dependent rotary surcharge (scales with local heads).
    pub fn rope_path(&self) -> u128 {
        self.logits_rope
    }

    /// Context-independent projection work.
    pub fn projections(&self) -> u128 {
        self.proj_q_down
            + self.proj_q_up
            + self.proj_q_rope
            + self.proj_kv
            + self.proj_k_rope
            + self.absorb_q_map
            + self.proj_out
    }

    pub fn total(&self) -> u128 {
        self.projections() + self.nope_path() + self.rope_path()
    }
}

/// Per-device attention FLOPs for `l_q` queries over `s_kv` cached tokens.
pub fn attention_flops(spec: &DeploymentSpec, l_q: usize, s_kv: usize) -> Result<FlopBreakdown> {
    spec.validate()?;
    let c = &spec.config;
    let heads = spec.heads_per_device()? as u128;
    let l_q = l_q as u128;
    let s = s_kv as u128;
    let d = c.hidden_dim as u128;
    let dh = c.head_dim as u128;
    let dr = c.rope_dim as u128;
    let rq = c.q_rank as u128;
    let width = spec.cache_width_per_device() as u128;

    Ok(match spec.mode {
        AttentionMode::Mla | AttentionMode::Tpla => FlopBreakdown {
            proj_q_down: 2 * l_q * d * rq,
            proj_q_up: 2 * l_q * rq * heads * dh,
            proj_q_rope: 2 * l_q * rq * heads * dr,
            proj_kv: 2 * l_q * d * width,
            proj_k_rope: 2 * l_q * d * dr,
            absorb_q_map: 2 * l_q * heads * dh * width,
            logits_nope: 2 * l_q * s * heads * width,
            logits_rope: 2 * l_q * s * heads * dr,
            attend_values: 2 * l_q * s * heads * width,
            proj_out: 2 * l_q * heads * width * d,
        },
        AttentionMode::Gqa { .. } => FlopBreakdown {
            proj_q_down: 0,
            proj_q_up: 2 * l_q * d * heads * dh,
            proj_q_rope: 0,
            proj_kv: 2 * l_q * d * width * 2, // keys and values
            proj_k_rope: 0,
            absorb_q_map: 0,
            logits_nope: 2 * l_q * s * heads * dh,
            logits_rope: 0,
            attend_values: 2 * l_q * s * heads * dh,
            proj_out: 2 * l_q * heads * dh * d,
        },
    })
}

/// Prefill: the prompt attends within itself (counted without the causal
/// halving, i.e. an `L_q x L_q` score block).
pub fn prefill_flops(spec: &DeploymentSpec) -> Result<FlopBreakdown> {
    attention_flops(spec, spec.query_len, spec.query_len)
}

/// One decode step: a single query over the cached context.
pub fn decode_step_flops(spec: &DeploymentSpec) -> Result<FlopBreakdown> {
    attention_flops(spec, 1, spec.context_len)
}

/// Per-device collective payload of one decode step, in bytes: the `[1 x D]`
/// output all-reduce whenever more than one device participates.
pub fn collective_bytes_per_step(spec: &DeploymentSpec) -> u64 {
    if spec.devices > 1 {
        (spec.config.hidden_dim * spec.bytes_per_element) as u64
    } else {
        0
    }
}

/// Which resource bounds a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    MemoryBound,
    ComputeBound,
}

/// Decode-step arithmetic intensity (FLOPs per byte of cache traffic) and
/// the implied regime. Cache reads dominate decode traffic; weight traffic
/// is out of scope and stated so in reports.
pub fn decode_regime(spec: &DeploymentSpec) -> Result<(f64, Regime)> {
    let flops = decode_step_flops(spec)?.total() as f64;
    let kv = kv_per_token(spec)?;
    let bytes = (kv.bytes as f64) * spec.context_len as f64;
    let intensity = flops / bytes;
    let balance = spec.compute_flops_per_s / spec.bandwidth_bytes_per_s;
    let regime = if intensity < balance {
        Regime::MemoryBound
    } else {
        Regime::ComputeBound
    };
    Ok((intensity, regime))
}

/// Predicted ratios of deployment `a` relative to deployment `b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioReport {
    pub kv_bytes_a: usize,
    pub kv_bytes_b: usize,
    /// Memory-bound decode throughput of `a` over `b`: the inverse ratio of
    /// per-device cache bytes per token.
    pub decode_throughput_ratio: f64,
    /// Compute-bound prefill latency of `a` over `b`: the ratio of total
    /// per-device prefill FLOPs (> 1 means `a` is slower).
    pub prefill_latency_ratio: f64,
    pub decode_intensity_a: f64,
    pub decode_intensity_b: f64,
    pub decode_regime_a: Regime,
    pub decode_regime_b: Regime,
    /// Hardware balance point (FLOPs per byte) both sides share.
    pub balance_flops_per_byte: f64,
}

/// Compares two deployments that share hardware parameters.
pub fn predict_ratios(a: &DeploymentSpec, b: &DeploymentSpec) -> Result<RatioReport> {
    a.validate()?;
    b.validate()?;
    if a.bytes_per_element != b.bytes_per_element
        || a.bandwidth_bytes_per_s != b.bandwidth_bytes_per_s
        || a.compute_flops_per_s != b.compute_flops_per_s
    {
        return Err(Error::InvalidConfig(
            "ratio prediction requires identical hardware parameters on both specs".to_string(),
        ));
    }
    let kv_a = kv_per_token(a)?;
    let kv_b = kv_per_token(b)?;
    let (int_a, reg_a) = decode_regime(a)?;
    let (int_b, reg_b) = decode_regime(b)?;
    Ok(RatioReport {
        kv_bytes_a: kv_a.bytes,
        kv_bytes_b: kv_b.bytes,
        decode_throughput_ratio: kv_b.bytes as f64 / kv_a.bytes as f64,
        prefill_latency_ratio: prefill_flops(a)?.total() as f64 / prefill_flops(b)?.total() as f64,
        decode_intensity_a: int_a,
        decode_intensity_b: int_b,
        decode_regime_a: reg_a,
        decode_regime_b: reg_b,
        balance_flops_per_byte: a.compute_flops_per_s / a.bandwidth_bytes_per_s,
    })
}

/// Full cost digest of one deployment, with ratios against a head-split
/// baseline with the same dims and device count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub spec: DeploymentSpec,
    pub kv: KvPerToken,
    pub prefill: FlopBreakdown,
    pub decode_step: FlopBreakdown,
    pub collective_bytes_per_step: u64,
    pub decode_intensity: f64,
    pub decode_regime: Regime,
    pub vs_mla_baseline: RatioReport,
    /// Scope note embedded in every serialized report.
    pub model_scope: String,
}

/// Builds the cost digest: the deployment, its FLOP/byte accounting, and
/// ratios against the mla baseline with identical dims and hardware.
pub fn cost_report(spec: &DeploymentSpec) -> Result<CostReport> {
    spec.validate()?;
    let baseline = DeploymentSpec {
        mode: AttentionMode::Mla,
        groups: 1,
        ..spec.clone()
    };
    let (intensity, regime) = decode_regime(spec)?;
    Ok(CostReport {
        spec: spec.clone(),
        kv: kv_per_token(spec)?,
        prefill: prefill_flops(spec)?,
        decode_step: decode_step_flops(spec)?,
        collective_bytes_per_step: collective_bytes_per_step(spec),
        decode_intensity: intensity,
        decode_regime: regime,
        vs_mla_baseline: predict_ratios(spec, &baseline)?,
        model_scope: "static arithmetic model: 2 FLOPs per multiply-add, cache-dominated decode \
                      traffic, no kernel or overlap effects"
            .to_string(),
    })
}

/// Renders the report as an aligned-column text table.
pub fn render_table(report: &CostReport) -> String {
    let rows: Vec<(String, String)> = vec![
        ("mode".to_string(), report.spec.mode.to_string()),
        ("devices k".to_string(), report.spec.devices.to_string()),
        ("groups g".to_string(), report.spec.groups.to_string()),
        ("context S_kv".to_string(), report.spec.context_len.to_string()),
        ("kv elems/token/device".to_string(), report.kv.elements.to_string()),
        ("kv bytes/token/device".to_string(), report.kv.bytes.to_string()),
        ("prefill FLOPs/device".to_string(), report.prefill.total().to_string()),
        ("decode FLOPs/step/device".to_string(), report.decode_step.total().to_string()),
        ("decode NoPE FLOPs".to_string(), report.decode_step.nope_path().to_string()),
        ("decode RoPE FLOPs".to_string(), report.decode_step.rope_path().to_string()),
        ("collective bytes/step".to_string(), report.collective_bytes_per_step.to_string()),
        ("decode intensity F/B".to_string(), format!("{:.4}", report.decode_intensity)),
        ("decode regime".to_string(), format!("{:?}", report.decode_regime)),
        (
            "decode throughput vs mla".to_string(),
            format!("{:.4}", report.vs_mla_baseline.decode_throughput_ratio),
        ),
        (
            "prefill latency vs mla".to_string(),
            format!("{:.4}", report.vs_mla_baseline.prefill_latency_ratio),
        ),
    ];
    let key_w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let val_w = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        out.push_str(&format!("{k:<key_w$}  {v:>val_w$}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw(config: ModelConfig, mode: AttentionMode, devices: usize, groups: usize) -> DeploymentSpec {
        DeploymentSpec {
            config,
            mode,
            devices,
            groups,
            context_len: 32_768,
            query_len: 4096,
            batch: 1,
            bytes_per_element: 2,
            bandwidth_bytes_per_s: 3.35e12,
            compute_flops_per_s: 9.9e14,
        }
    }

    fn llama70b_dims() -> ModelConfig {
        // Grouped-query reference exemplar: 64 query heads of width 128,
        // 8 kv heads. The latent fields are unused by gqa accounting.
        ModelConfig::new(8192, 64, 128, 128, 512, 1536, 1e-6).unwrap()
    }

    #[test]
    fn kv_per_token_reproduces_production_dimension_arithmetic() {
        let dsv3 = ModelConfig::dsv3_dims();
        // Replicated latent: 64 + 512 = 576 on every device, any k.
        for k in [1, 2, 4, 8] {
            let spec = hw(dsv3.clone(), AttentionMode::Mla, k, 1);
            assert_eq!(kv_per_token(&spec).unwrap().elements, 576);
        }
        // Two-group latent split: 64 + 256 = 320 per device.
        let spec = hw(dsv3.clone(), AttentionMode::Tpla, 2, 2);
        assert_eq!(kv_per_token(&spec).unwrap().elements, 320);
        // Grouped-query reference: 2*8*128 = 2048 total, 512 at k=4.
        let spec = hw(llama70b_dims(), AttentionMode::Gqa { kv_heads: 8 }, 1, 1);
        assert_eq!(kv_per_token(&spec).unwrap().elements, 2048);
        let spec = hw(llama70b_dims(), AttentionMode::Gqa { kv_heads: 8 }, 4, 1);
        assert_eq!(kv_per_token(&spec).unwrap().elements, 512);
    }

    #[test]
    fn kv_bytes_strictly_decrease_in_group_count() {
        let dsv3 = ModelConfig::dsv3_dims();
        let mut prev = usize::MAX;
        for g in [1, 2, 4, 8] {
            let spec = hw(dsv3.clone(), AttentionMode::Tpla, g, g);
            let b = kv_per_token(&spec).unwrap().bytes;
            assert!(b < prev, "g={g}: {b} !< {prev}");
            prev = b;
        }
    }

    #[test]
    fn decode_byte_ratio_matches_measured_speedup_within_tolerance() {
        let dsv3 = ModelConfig::dsv3_dims();
        let tpla = hw(dsv3.clone(), AttentionMode::Tpla, 2, 2);
        let mla = hw(dsv3, AttentionMode::Mla, 2, 1);
        let r = predict_ratios(&tpla, &mla).unwrap();
        assert!((r.decode_throughput_ratio - 1.8).abs() < 1e-12, "576/320 = 1.8 exactly");
        // The measured long-context speedup is 1.79x; the pure byte ratio
        // lands within 0.6% of it.
        assert!((r.decode_throughput_ratio / 1.79 - 1.0).abs() < 0.006);
    }

    #[test]
    fn nope_flops_identical_between_latent_split_and_head_split() {
        // The two-group latent split with all heads per device does exactly
        // the same context work as the two-way head split with the full
        // latent: h * (L/2) == (h/2) * L. Checked as exact integers over a
        // grid of at least 27 combinations.
        let mut combos = 0;
        for h_q in [4, 8, 128] {
            for d_h in [8, 64, 128] {
                for s_kv in [128, 4096, 32_768] {
                    let cfg =
                        ModelConfig::new(1024, h_q, d_h, 64, 4 * d_h, 512, 1e-6).unwrap();
                    let mut tpla = hw(cfg.clone(), AttentionMode::Tpla, 2, 2);
                    tpla.context_len = s_kv;
                    let mut mla = hw(cfg, AttentionMode::Mla, 2, 1);
                    mla.context_len = s_kv;
                    let f_tpla = decode_step_flops(&tpla).unwrap();
                    let f_mla = decode_step_flops(&mla).unwrap();
                    assert_eq!(f_tpla.nope_path(), f_mla.nope_path(), "h={h_q} d={d_h} s={s_kv}");
                    combos += 1;
                }
            }
        }
        assert!(combos >= 27);
    }

    #[test]
    fn rope_surcharge_doubles_with_duplicated_heads() {
        let dsv3 = ModelConfig::dsv3_dims();
        let tpla = hw(dsv3.clone(), AttentionMode::Tpla, 2, 2);
        let mla = hw(dsv3, AttentionMode::Mla, 2, 1);
        let f_tpla = decode_step_flops(&tpla).unwrap();
        let f_mla = decode_step_flops(&mla).unwrap();
        // All heads per device instead of half: the rotary-logit work per
        // device doubles (the positional path cannot be sliced).
        assert_eq!(f_tpla.rope_path(), 2 * f_mla.rope_path());
        // Query projections double too, while the latent projection halves.
        assert_eq!(f_tpla.proj_q_up, 2 * f_mla.proj_q_up);
        assert_eq!(2 * f_tpla.proj_kv, f_mla.proj_kv);
    }

    #[test]
    fn single_device_single_group_modes_coincide() {
        let cfg = ModelConfig::toy();
        let tpla = hw(cfg.clone(), AttentionMode::Tpla, 1, 1);
        let mla = hw(cfg, AttentionMode::Mla, 1, 1);
        assert_eq!(decode_step_flops(&tpla).unwrap(), decode_step_flops(&mla).unwrap());
        assert_eq!(prefill_flops(&tpla).unwrap(), prefill_flops(&mla).unwrap());
        assert_eq!(
            kv_per_token(&tpla).unwrap(),
            kv_per_token(&mla).unwrap()
        );
        assert_eq!(collective_bytes_per_step(&tpla), 0);
    }

    #[test]
    fn identical_specs_predict_unit_ratios() {
        let dsv3 = ModelConfig::dsv3_dims();
        let spec = hw(dsv3, AttentionMode::Tpla, 2, 2);
        let r = predict_ratios(&spec, &spec).unwrap();
        assert_eq!(r.decode_throughput_ratio, 1.0);
        assert_eq!(r.prefill_latency_ratio, 1.0);
    }

    #[test]
    fn separated_prefill_needs_fewer_flops_than_sliced_prefill() {
        // Prefill on the head-split layout (what prefill/decode separation
        // uses) versus prefill on the latent-split layout: the latter runs
        // every head on every device, so its per-device FLOPs are strictly
        // larger. Direction only; the magnitude is kernel-dependent.
        let dsv3 = ModelConfig::dsv3_dims();
        let tpla = hw(dsv3.clone(), AttentionMode::Tpla, 2, 2);
        let mla = hw(dsv3, AttentionMode::Mla, 2, 1);
        let r = predict_ratios(&tpla, &mla).unwrap();
        assert!(r.prefill_latency_ratio > 1.0, "got {}", r.prefill_latency_ratio);
    }

    #[test]
    fn long_context_decode_is_memory_bound() {
        let dsv3 = ModelConfig::dsv3_dims();
        let spec = hw(dsv3, AttentionMode::Tpla, 2, 2);
        let (intensity, regime) = decode_regime(&spec).unwrap();
        assert_eq!(regime, Regime::MemoryBound);
        // All 128 heads read the same 320-element cache line, so each cache
        // byte feeds hundreds of FLOPs — yet that still sits below the
        // ~295 FLOP/byte balance point of the modeled accelerator.
        let balance = spec.compute_flops_per_s / spec.bandwidth_bytes_per_s;
        assert!(intensity > 100.0, "got {intensity}");
        assert!(intensity < balance, "got {intensity} vs balance {balance}");
    }

    #[test]
    fn ratios_require_shared_hardware() {
        let dsv3 = ModelConfig::dsv3_dims();
        let a = hw(dsv3.clone(), AttentionMode::Tpla, 2, 2);
        let mut b = hw(dsv3, AttentionMode::Mla, 2, 1);
        b.bandwidth_bytes_per_s *= 2.0;
        assert!(predict_ratios(&a, &b).is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_specs() {
        let cfg = ModelConfig::toy();
        // mla with sliced cache.
        assert!(hw(cfg.clone(), AttentionMode::Mla, 2, 2).validate().is_err());
        // groups must divide devices.
        assert!(hw(cfg.clone(), AttentionMode::Tpla, 3, 2).validate().is_err());
        // heads not divisible by member count (toy has 4 heads).
        assert!(hw(cfg.clone(), AttentionMode::Tpla, 16, 2).validate().is_err());
        // zero context.
        let mut s = hw(cfg, AttentionMode::Mla, 1, 1);
        s.context_len = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn report_serializes_and_renders() {
        let dsv3 = ModelConfig::dsv3_dims();
        let spec = hw(dsv3, AttentionMode::Tpla, 2, 2);
        let report = cost_report(&spec).unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.kv, report.kv);
        let table = render_table(&report);
        assert!(table.contains("kv elems/token/device"));
        assert!(table.contains("320"));
        // Aligned columns: fixed label and value widths make every line the
        // same length.
        let lengths: Vec<usize> = table.lines().map(|l| l.len()).collect();
        assert!(!lengths.is_empty());
        assert!(lengths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn flop_convention_is_two_per_multiply_add() {
        // One query, one cached token, one head, width-1 latent: the
        // non-positional path is 1 MAC of logits + 1 MAC of values = 4 FLOPs.
        let cfg = ModelConfig::new(4, 1, 1, 2, 1, 2, 0.0).unwrap();
        let mut spec = hw(cfg, AttentionMode::Mla, 1, 1);
        spec.context_len = 1;
        let f = decode_step_flops(&spec).unwrap();
        assert_eq!(f.logits_nope, 2);
        assert_eq!(f.attend_values, 2);
        assert_eq!(f.nope_path(), 4);
    }
}
