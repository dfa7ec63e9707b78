//! `tpla cost` — static per-device cache and FLOP accounting for one
//! deployment, including throughput/latency ratios against the
//! single-latent baseline with identical dimensions and hardware.
//!
//! The deployment comes either from a JSON file (`--deployment`) or is
//! assembled from flags around a model preset. The model is pure
//! arithmetic: 2 FLOPs per multiply-add, cache-dominated decode traffic, no
//! kernel effects — the report says so in its `model_scope` field.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use tpla_core::cost::{cost_report, render_table, AttentionMode, CostReport, DeploymentSpec};

use crate::output::{resolve_config, write_json, CliError, Ctx, Envelope};
use crate::Format;

#[derive(Args)]
pub struct CostArgs {
    /// Full deployment spec from a JSON file; overrides every other flag.
    #[arg(long)]
    deployment: Option<PathBuf>,

    /// Named model preset (toy, dsv3-dims).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,

    /// Model config JSON file (alternative to --preset).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Attention layout: mla, tpla, or gqa (gqa uses --kv-heads).
    #[arg(long, default_value = "tpla")]
    mode: String,

    /// Key/value head count for the gqa reference layout.
    #[arg(long, default_value_t = 8)]
    kv_heads: usize,

    /// Device count.
    #[arg(long, default_value_t = 2)]
    k: usize,

    /// Latent group count.
    #[arg(long, default_value_t = 2)]
    g: usize,

    /// Cached context length a decode step attends over.
    #[arg(long, default_value_t = 32_768)]
    context: usize,

    /// Prompt length for prefill accounting.
    #[arg(long, default_value_t = 4096)]
    query: usize,

    #[arg(long, default_value_t = 1)]
    batch: usize,

    /// Cache element width in bytes (2 for fp16/bf16).
    #[arg(long, default_value_t = 2)]
    bytes_per_element: usize,

    /// Device memory bandwidth, bytes per second.
    #[arg(long, default_value_t = 3.35e12)]
    bandwidth: f64,

    /// Device compute rate, FLOPs per second.
    #[arg(long, default_value_t = 9.9e14)]
    compute: f64,
}

#[derive(Serialize)]
struct Resolved {
    spec: DeploymentSpec,
}

pub fn run(args: &CostArgs, ctx: &Ctx) -> Result<u8, CliError> {
    let spec = match &args.deployment {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read deployment '{}': {e}", path.display()))
            })?;
            serde_json::from_str::<DeploymentSpec>(&text).map_err(|e| {
                CliError::Usage(format!("deployment '{}' is not valid: {e}", path.display()))
            })?
        }
        None => {
            let config =
                resolve_config(args.preset.as_deref(), args.config.as_deref(), "dsv3-dims")?;
            let mode = match args.mode.as_str() {
                "mla" => AttentionMode::Mla,
                "tpla" => AttentionMode::Tpla,
                "gqa" => AttentionMode::Gqa {
                    kv_heads: args.kv_heads,
                },
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown mode '{other}' (mla, tpla, gqa)"
                    )))
                }
            };
            DeploymentSpec {
                config,
                mode,
                devices: args.k,
                groups: args.g,
                context_len: args.context,
                query_len: args.query,
                batch: args.batch,
                bytes_per_element: args.bytes_per_element,
                bandwidth_bytes_per_s: args.bandwidth,
                compute_flops_per_s: args.compute,
            }
        }
    };
    spec.validate()?;

    let report: CostReport = cost_report(&spec)?;
    let envelope = Envelope {
        command: "cost",
        resolved: Resolved { spec },
        hashes: BTreeMap::new(),
        report,
    };
    let json = write_json(&ctx.out_dir.join("cost_report.json"), &envelope)?;
    let table = render_table(&envelope.report);

    match ctx.format {
        Format::Json => print!("{json}"),
        Format::Csv => {
            println!("key,value");
            for line in table.lines() {
                if let Some((k, v)) = line.rsplit_once("  ") {
                    println!("{},{}", k.trim_end(), v.trim_start());
                }
            }
        }
        Format::Table => print!("{table}"),
    }
    Ok(0)
}
