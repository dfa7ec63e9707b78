//! Shared command plumbing: error-to-exit-code mapping, output directory
//! resolution, and deterministic (timestamp-free, atomically written)
//! report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use tpla_core::container::write_atomic;
use tpla_core::ModelConfig;

use crate::Format;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TPLA_OUT_DIR";

/// Anything that should terminate the process with the usage/config exit
/// code (2). Verification *failures* are not errors — commands report them
/// through their exit status instead.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
}

impl From<tpla_core::Error> for CliError {
    fn from(e: tpla_core::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Per-invocation context shared by every subcommand.
pub struct Ctx {
    pub out_dir: PathBuf,
    pub format: Format,
    pub seed: u64,
}

/// Flag value, then the environment, then `./tpla-out`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_DIR_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("tpla-out")
}

/// Loads the model config from `--config PATH` or `--preset NAME` (the two
/// are mutually exclusive), falling back to `default_preset`.
pub fn resolve_config(
    preset: Option<&str>,
    config: Option<&Path>,
    default_preset: &str,
) -> Result<ModelConfig, CliError> {
    match (preset, config) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--preset and --config are mutually exclusive".to_string(),
        )),
        (Some(name), None) => Ok(ModelConfig::preset(name)?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config '{}': {e}", path.display()))
            })?;
            let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("config '{}' is not valid: {e}", path.display()))
            })?;
            cfg.validate()?;
            Ok(cfg)
        }
        (None, None) => Ok(ModelConfig::preset(default_preset)?),
    }
}

/// Everything a report file carries besides the payload: the command name,
/// the fully resolved inputs, and content hashes of any binary artifacts
/// involved, so a report can always be traced to exactly what produced it.
#[derive(Serialize)]
pub struct Envelope<C: Serialize, R: Serialize> {
    pub command: &'static str,
    pub resolved: C,
    pub hashes: BTreeMap<String, String>,
    pub report: R,
}

/// Serializes the envelope, writes it atomically, and returns the text so
/// `--format json` can reuse the exact bytes on stdout.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(text)
}

/// Atomic plain-text (CSV, table) writer.
pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}
