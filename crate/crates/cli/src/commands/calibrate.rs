//! `tpla calibrate` — build an orthogonal latent transform and write it as
//! a binary container next to a JSON report of its slice statistics.
//!
//! Calibration features come from a container file (`--calibration`) or a
//! synthetic second-moment spec (`--synthetic "eigs=4,3,2,1;rows=4096"`).
//! The data-free kinds (identity, Hadamard) fall back to the model preset's
//! latent width when no features are given; the principal-component kind
//! requires them.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use tpla_core::container::{load_calibration, save_transform};
use tpla_core::reparam::{
    build_hadamard, build_pca, partition_energy, reestimate_logit_scales, CalibrationSet,
    EnergyReport, OrthogonalTransform, TransformKind,
};
use tpla_core::synth::{gen_features, CovSpec};
use tpla_core::verify::transform_hash;
use tpla_core::SeededRng;

use crate::output::{resolve_config, write_json, CliError, Ctx, Envelope};
use crate::Format;

#[derive(Args)]
pub struct CalibrateArgs {
    /// Transform kind to build.
    #[arg(long, default_value = "pca")]
    transform: String,

    /// Synthetic feature spec, e.g. "eigs=4,3,2,1;rows=4096;rotate=7"
    /// (rows defaults to 1024; omit rotate for axis-aligned features).
    #[arg(long, conflicts_with = "calibration")]
    synthetic: Option<String>,

    /// Calibration features from a binary container file.
    #[arg(long)]
    calibration: Option<PathBuf>,

    /// Latent group count the transform serves.
    #[arg(long, default_value_t = 2)]
    g: usize,

    /// Remove column means before the eigendecomposition (classical
    /// covariance instead of the second moment RMS slicing actually splits).
    #[arg(long)]
    center: bool,

    /// Re-fit the logit scales to the calibration features by least squares
    /// instead of reusing the energy-based defaults.
    #[arg(long)]
    reestimate: bool,

    /// Named model preset supplying the latent width when no features are
    /// given (toy, dsv3-dims).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,

    /// Model config JSON file (alternative to --preset).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct Resolved {
    transform: String,
    group_count: usize,
    center: bool,
    reestimate: bool,
    seed: u64,
    feature_source: String,
    feature_rows: usize,
    latent_dim: usize,
}

#[derive(Serialize)]
struct Report {
    kind: String,
    dim: usize,
    group_count: usize,
    /// Reciprocal energy fraction of the leading slice (the RMS correction
    /// constant sliced devices apply).
    alpha: f64,
    rms_scales: Vec<f64>,
    logit_scales: Vec<f64>,
    energy_fractions: Vec<f64>,
    orthogonality_error: f64,
    rank_deficient: bool,
    eigenvalues: Option<Vec<f64>>,
    /// Slice-energy balance of the calibration features under this
    /// transform (present whenever features were given).
    energy: Option<EnergyReport>,
    transform_file: PathBuf,
}

pub fn run(args: &CalibrateArgs, ctx: &Ctx) -> Result<u8, CliError> {
    let kind: TransformKind = args
        .transform
        .parse()
        .map_err(|e: tpla_core::Error| CliError::Usage(e.to_string()))?;

    // Resolve calibration features (may legitimately be absent).
    let mut rng = SeededRng::new(ctx.seed);
    let (cal, source): (Option<CalibrationSet>, String) = match (&args.synthetic, &args.calibration)
    {
        (Some(spec_text), None) => {
            let spec: CovSpec = spec_text.parse()?;
            (Some(gen_features(&spec, &mut rng)?), format!("synthetic:{spec_text}"))
        }
        (None, Some(path)) => {
            let cal = load_calibration(path).map_err(|e| {
                CliError::Usage(format!("cannot load calibration '{}': {e}", path.display()))
            })?;
            (Some(cal), path.display().to_string())
        }
        (None, None) => (None, "none".to_string()),
        (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
    };

    let dim = match &cal {
        Some(c) => c.dim(),
        None => resolve_config(args.preset.as_deref(), args.config.as_deref(), "toy")?.latent_dim,
    };
    if args.g == 0 || dim % args.g != 0 {
        return Err(CliError::Usage(format!(
            "group count {} does not divide latent width {dim}",
            args.g
        )));
    }

    let (mut transform, rank_deficient, eigenvalues) = match kind {
        TransformKind::Identity => (OrthogonalTransform::identity(dim, args.g)?, false, None),
        TransformKind::Hadamard => (
            build_hadamard(dim, args.g, &mut rng, true)?,
            false,
            None,
        ),
        TransformKind::Pca => {
            let cal = cal.as_ref().ok_or_else(|| {
                CliError::Usage(
                    "--transform pca needs calibration features (--calibration or --synthetic)"
                        .to_string(),
                )
            })?;
            let built = build_pca(cal, args.g, args.center)?;
            (built.transform, built.rank_deficient, Some(built.eigenvalues))
        }
    };
    if args.reestimate {
        let cal = cal.as_ref().ok_or_else(|| {
            CliError::Usage("--reestimate needs calibration features".to_string())
        })?;
        transform.set_logit_scales(reestimate_logit_scales(cal, &transform)?)?;
    }
    if rank_deficient {
        eprintln!(
            "warning: calibration features do not pin down all {dim} directions; \
             transform flagged rank-deficient"
        );
    }

    let energy = match &cal {
        Some(c) => Some(partition_energy(c, &transform, args.g)?),
        None => None,
    };

    let transform_file = ctx.out_dir.join("transform.tpla");
    save_transform(
        &transform_file,
        &transform,
        &[("source", source.as_str()), ("seed", &ctx.seed.to_string())],
    )?;

    let mut hashes = BTreeMap::new();
    hashes.insert("transform".to_string(), transform_hash(&transform)?);

    let report = Report {
        kind: transform.kind().to_string(),
        dim,
        group_count: args.g,
        alpha: transform.alpha(),
        rms_scales: transform.scales().rms.clone(),
        logit_scales: transform.scales().logit.clone(),
        energy_fractions: transform.energy_fractions(),
        orthogonality_error: transform.orthogonality_error(),
        rank_deficient,
        eigenvalues,
        energy,
        transform_file: transform_file.clone(),
    };
    let envelope = Envelope {
        command: "calibrate",
        resolved: Resolved {
            transform: args.transform.clone(),
            group_count: args.g,
            center: args.center,
            reestimate: args.reestimate,
            seed: ctx.seed,
            feature_source: source,
            feature_rows: cal.as_ref().map(|c| c.rows()).unwrap_or(0),
            latent_dim: dim,
        },
        hashes,
        report,
    };
    let json = write_json(&ctx.out_dir.join("calibrate_report.json"), &envelope)?;

    match ctx.format {
        Format::Json => print!("{json}"),
        Format::Csv => {
            println!("slice,energy_fraction,rms_scale,logit_scale");
            let s = transform.scales();
            for j in 0..args.g {
                println!("{j},{},{},{}", 1.0 / s.rms[j], s.rms[j], s.logit[j]);
            }
        }
        Format::Table => {
            println!(
                "{} transform, dim {dim}, {} slices -> {}",
                transform.kind(),
                args.g,
                transform_file.display()
            );
            println!("alpha {:.6}", transform.alpha());
            println!("energy fractions {:?}", transform.energy_fractions());
            if let Some(e) = &envelope.report.energy {
                println!(
                    "feature imbalance mean {:.4e} max {:.4e} over {} rows",
                    e.mean_imbalance, e.max_imbalance, e.rows
                );
            }
            if rank_deficient {
                println!("rank-deficient: true");
            }
        }
    }
    Ok(0)
}
