//! `tpla verify` — run the library's named self-check suites and report
//! every check's verdict. Exit 1 the moment any check fails, so CI can gate
//! on the command alone.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use tpla_core::container::load_transform;
use tpla_core::verify::{run_all_suites, transform_file_suite, transform_hash, SuiteReport};
use tpla_core::ModelConfig;

use crate::output::{resolve_config, write_json, CliError, Ctx, Envelope};
use crate::Format;

#[derive(Args)]
pub struct VerifyArgs {
    /// Named model preset (toy, dsv3-dims).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,

    /// Model config JSON file (alternative to --preset).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Validate a transform container file (orthogonality, scale sanity)
    /// in addition to the built-in suites.
    #[arg(long)]
    transform_file: Option<PathBuf>,

    /// Run only the transform-file checks, skipping the built-in suites.
    #[arg(long, requires = "transform_file")]
    only_transform: bool,
}

#[derive(Serialize)]
struct Resolved {
    config: ModelConfig,
    seed: u64,
    transform_file: Option<PathBuf>,
}

#[derive(Serialize)]
struct Report {
    passed: bool,
    suites: Vec<SuiteReport>,
}

pub fn run(args: &VerifyArgs, ctx: &Ctx) -> Result<u8, CliError> {
    let cfg = resolve_config(args.preset.as_deref(), args.config.as_deref(), "toy")?;
    let mut hashes = BTreeMap::new();

    let mut suites = if args.only_transform {
        Vec::new()
    } else {
        run_all_suites(&cfg, ctx.seed)
    };
    if let Some(path) = &args.transform_file {
        let t = load_transform(path).map_err(|e| {
            CliError::Usage(format!("cannot load transform '{}': {e}", path.display()))
        })?;
        hashes.insert("transform".to_string(), transform_hash(&t)?);
        suites.push(transform_file_suite(&t));
    }

    let passed = suites.iter().all(|s| s.passed());
    let envelope = Envelope {
        command: "verify",
        resolved: Resolved {
            config: cfg,
            seed: ctx.seed,
            transform_file: args.transform_file.clone(),
        },
        hashes,
        report: Report {
            passed,
            suites: suites.clone(),
        },
    };
    let json = write_json(&ctx.out_dir.join("verify_report.json"), &envelope)?;

    match ctx.format {
        Format::Json => print!("{json}"),
        Format::Csv => {
            println!("suite,check,passed,detail");
            for s in &suites {
                for c in &s.checks {
                    println!("{},{},{},{}", s.suite, c.name, c.passed, c.detail.replace(',', ";"));
                }
            }
        }
        Format::Table => {
            for s in &suites {
                for c in &s.checks {
                    let tag = if c.passed { "PASS" } else { "FAIL" };
                    println!("{tag}  {}/{} — {}", s.suite, c.name, c.detail);
                }
            }
            let total: usize = suites.iter().map(|s| s.checks.len()).sum();
            let failed: usize = suites.iter().map(|s| s.failures().len()).sum();
            println!(
                "{} checks, {} failed — {}",
                total,
                failed,
                if passed { "OK" } else { "FAILED" }
            );
        }
    }
    Ok(u8::from(!passed))
}
