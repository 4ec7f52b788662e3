//! Run orchestration behind the `focusft` binary.
//!
//! Each subcommand is a plain function over a validated [`RunConfig`] so the
//! binary, the integration tests and the acceptance suite share one path.

pub mod analyze;
pub mod eval;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use focusft::bilevel::Mode;
use focusft::config::{Preset, RunConfig};
use focusft::model::ModelWeights;
use focusft::taskgen::{make_splits, read_jsonl, Sample};
use focusft::Error;

pub use focusft::Result;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::DegenerateRow { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Where a run's configuration comes from.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub preset: Option<Preset>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
}

impl ConfigSource {
    /// Preset (toy when absent), then the config file, then flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = self.preset.unwrap_or(Preset::Toy).load()?;
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                RunConfig::parse_over(base, &text)?
            }
            None => base,
        };
        if let Some(mode) = self.mode {
            cfg = cfg.with_mode(mode);
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Accepts either a checkpoint directory or a run directory holding one.
pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let direct = path.join(focusft::checkpoint::MANIFEST);
    let nested = path.join(train::CHECKPOINT_DIR);
    if direct.exists() {
        focusft::checkpoint::load(path)
    } else if nested.join(focusft::checkpoint::MANIFEST).exists() {
        focusft::checkpoint::load(&nested)
    } else {
        Err(Error::Usage(format!("no checkpoint found at {}", path.display())))
    }
}

/// Samples from a JSONL file, or else the eval split the config generates.
pub fn load_samples(data: Option<&Path>, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let samples = match data {
        Some(p) => read_jsonl(p)?,
        None => make_splits(&cfg.task, 0, cfg.n_eval, cfg.data_seed)?.1,
    };
    if samples.is_empty() {
        return Err(Error::Usage("no samples to process".into()));
    }
    Ok(samples)
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Usage(format!("cannot create {}: {e}", dir.display())))
}
