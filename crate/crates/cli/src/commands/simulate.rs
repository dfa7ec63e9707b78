//! `tpla simulate` — run the three-variant rollout (single-device
//! reference, sharded from scratch, sharded with prefill handoff) on a
//! synthetic anisotropic model and record every step's relative error.
//!
//! Writes a JSON report plus a CSV error series (the plotting interface).

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use tpla_core::container::weights_to_container;
use tpla_core::pipeline::{run_pipeline, FeedMode, PipelineReport};
use tpla_core::reparam::{build_hadamard, build_pca, OrthogonalTransform, TransformKind};
use tpla_core::shard::{make_plan, Exactness, ShardMode};
use tpla_core::synth::{collect_latents, gen_ar1_inputs, init_anisotropic_weights};
use tpla_core::verify::transform_hash;
use tpla_core::{ModelConfig, SeededRng};

use crate::output::{resolve_config, write_json, write_text, CliError, Ctx, Envelope};
use crate::Format;

#[derive(Args)]
pub struct SimulateArgs {
    /// Named model preset (toy, dsv3-dims).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,

    /// Model config JSON file (alternative to --preset).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Latent transform applied to the weights before sharding.
    #[arg(long, default_value = "hadamard")]
    transform: String,

    /// Device count.
    #[arg(long, default_value_t = 2)]
    k: usize,

    /// Latent group count.
    #[arg(long, default_value_t = 2)]
    g: usize,

    /// Sharding mode (tpla, gla, mla_heads); pipeline variants are defined
    /// for tpla.
    #[arg(long, default_value = "tpla")]
    mode: String,

    /// Correction setting for the sharded variants
    /// (sliced, exact_rms, exact_softmax, exact_both).
    #[arg(long, default_value = "sliced")]
    exactness: String,

    /// Decode steps after the prompt.
    #[arg(long, default_value_t = 16)]
    steps: usize,

    /// Prompt length fed through prefill.
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,

    /// Feed mode: closed_loop (variants consume their own outputs) or
    /// teacher_forced (all consume the reference outputs).
    #[arg(long, default_value = "closed_loop")]
    feed: String,

    /// Serial correlation of successive prompt tokens (0 = independent).
    #[arg(long, default_value_t = 0.85)]
    rho: f64,

    /// Per-coordinate geometric decay of latent energy in the synthetic
    /// model (1 = isotropic).
    #[arg(long, default_value_t = 0.8)]
    decay: f64,
}

#[derive(Serialize)]
struct Resolved {
    config: ModelConfig,
    seed: u64,
    transform: String,
    devices: usize,
    groups: usize,
    mode: ShardMode,
    exactness: Exactness,
    steps: usize,
    prompt_len: usize,
    feed: FeedMode,
    rho: f64,
    decay: f64,
}

pub fn run(args: &SimulateArgs, ctx: &Ctx) -> Result<u8, CliError> {
    let cfg = resolve_config(args.preset.as_deref(), args.config.as_deref(), "toy")?;
    let kind: TransformKind = args.transform.parse().map_err(usage)?;
    let mode: ShardMode = args.mode.parse().map_err(usage)?;
    let exactness: Exactness = args.exactness.parse().map_err(usage)?;
    let feed: FeedMode = args.feed.parse().map_err(usage)?;

    let mut rng = SeededRng::new(ctx.seed);
    let w = init_anisotropic_weights(&cfg, &mut rng, 1.0, args.decay, true)?;
    let transform = match kind {
        TransformKind::Identity => OrthogonalTransform::identity(cfg.latent_dim, args.g)?,
        TransformKind::Hadamard => build_hadamard(cfg.latent_dim, args.g, &mut rng, true)?,
        TransformKind::Pca => {
            let cal = collect_latents(&cfg, &w, &mut rng, 512)?;
            build_pca(&cal, args.g, false)?.transform
        }
    };
    let plan = make_plan(&cfg, args.k, args.g, mode)?;
    let prompt = gen_ar1_inputs(args.prompt_len, cfg.hidden_dim, args.rho, &mut rng)?;
    let run = run_pipeline(
        &cfg,
        &w,
        &transform,
        &plan,
        exactness,
        &prompt,
        args.steps,
        feed,
    )?;
    let report: PipelineReport = run.report(&cfg, &transform, &plan);

    let mut hashes = BTreeMap::new();
    hashes.insert(
        "weights".to_string(),
        weights_to_container(&cfg, &w, &[])?.content_hash()?,
    );
    hashes.insert("transform".to_string(), transform_hash(&transform)?);

    let envelope = Envelope {
        command: "simulate",
        resolved: Resolved {
            config: cfg,
            seed: ctx.seed,
            transform: args.transform.clone(),
            devices: args.k,
            groups: args.g,
            mode,
            exactness,
            steps: args.steps,
            prompt_len: args.prompt_len,
            feed,
            rho: args.rho,
            decay: args.decay,
        },
        hashes,
        report,
    };
    let json = write_json(&ctx.out_dir.join("simulate_report.json"), &envelope)?;

    let mut csv = String::from("step,tpla_full_rel_err,tpla_pd_sep_rel_err\n");
    let r = &envelope.report;
    for (i, (a, b)) in r
        .tpla_full_errors
        .iter()
        .zip(&r.tpla_pd_sep_errors)
        .enumerate()
    {
        csv.push_str(&format!("{},{a:e},{b:e}\n", i + 1));
    }
    write_text(&ctx.out_dir.join("simulate_errors.csv"), &csv)?;

    match ctx.format {
        Format::Json => print!("{json}"),
        Format::Csv => print!("{csv}"),
        Format::Table => {
            println!(
                "{} steps after a {}-token prompt, {} on {} devices x {} groups ({})",
                r.steps, r.prompt_len, r.plan_mode, r.plan_devices, r.plan_groups, r.exactness
            );
            println!(
                "prefill handoff bitwise-equal to reference: {}",
                r.pd_prefill_bitwise_equal
            );
            println!(
                "sharded-from-scratch error: mean {:.4e}, median {:.4e}, last {:.4e}",
                r.tpla_full_summary.mean, r.tpla_full_summary.median, r.tpla_full_summary.last
            );
            println!(
                "prefill-handoff   error: mean {:.4e}, median {:.4e}, last {:.4e}",
                r.tpla_pd_sep_summary.mean, r.tpla_pd_sep_summary.median, r.tpla_pd_sep_summary.last
            );
        }
    }
    Ok(0)
}

fn usage(e: tpla_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}
