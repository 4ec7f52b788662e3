//! Flat `key = value` run configuration with `#` comments.
//!
//! Keys are dotted (`model.n_layers`, `trainer.eta_in`, ...). Keys left out
//! keep the value of the base preset named by an optional leading
//! `preset = toy|paper` line (toy when absent). Unknown keys are errors.

use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bilevel::{Mode, TrainerConfig};
use crate::error::{Error, Result};
use crate::fastweights::AdapterConfig;
use crate::model::{FfnKind, FfnMatrix, ModelConfig};
use crate::taskgen::TaskConfig;
use crate::tensor::Float;

pub const TOY_PRESET: &str = include_str!("../../../presets/toy.cfg");
pub const PAPER_PRESET: &str = include_str!("../../../presets/paper.cfg");

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapters: AdapterConfig,
    pub trainer: TrainerConfig,
    pub task: TaskConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub data_seed: u64,
    pub out_dir: PathBuf,
    /// Save θ every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Put wall times into the metrics file instead of nulls.
    pub log_timing: bool,
    pub depth_bins: usize,
    /// Diagnostics over every query row instead of response rows only.
    pub all_queries: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adapters: AdapterConfig::default(),
            trainer: TrainerConfig::default(),
            task: TaskConfig::default(),
            n_train: 200,
            n_eval: 50,
            data_seed: 7,
            out_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 0,
            log_timing: false,
            depth_bins: 5,
            all_queries: false,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn ctx(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) if m.starts_with(key) => Error::Config(m),
        Error::Config(m) | Error::Parse(m) => Error::Config(format!("{key}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}; expected toy or paper"))),
        }
    }
}

impl Preset {
    pub fn text(self) -> &'static str {
        match self {
            Preset::Toy => TOY_PRESET,
            Preset::Paper => PAPER_PRESET,
        }
    }

    pub fn load(self) -> Result<RunConfig> {
        RunConfig::parse(self.text())
    }
}

fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
        })?;
        out.push((n + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Parse and fully validate.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(RunConfig::default(), text)
    }

    /// Applies `text` on top of `base`. A leading `preset = ...` line
    /// replaces the base with that preset.
    pub fn parse_over(base: RunConfig, text: &str) -> Result<Self> {
        let lines = entries(text)?;
        let mut cfg = base;
        let mut rest = lines.as_slice();
        if let Some((_, k, v)) = rest.first() {
            if k == "preset" {
                let preset: Preset = v.parse()?;
                // Preset files hold no preset line of their own.
                cfg = RunConfig::from_entries(RunConfig::default(), &entries(preset.text())?)?;
                rest = &rest[1..];
            }
        }
        let cfg = RunConfig::from_entries(cfg, rest)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn from_entries(mut cfg: RunConfig, entries: &[(usize, String, String)]) -> Result<Self> {
        for (line, k, v) in entries {
            cfg.set(k, v)
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                    other => other,
                })?;
        }
        Ok(cfg)
    }

    /// Assign one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, a, t, task) = (&mut self.model, &mut self.adapters, &mut self.trainer, &mut self.task);
        match key {
            "model.n_layers" => m.n_layers = num(key, value)?,
            "model.n_heads" => m.n_heads = num(key, value)?,
            "model.d_model" => m.d_model = num(key, value)?,
            "model.d_ff" => m.d_ff = num(key, value)?,
            "model.vocab_size" => {
                m.vocab_size = num(key, value)?;
                task.vocab_size = m.vocab_size;
            }
            "model.max_seq_len" => m.max_seq_len = num(key, value)?,
            "model.rope" => m.rope = boolean(key, value)?,
            "model.rope_base" => m.rope_base = num(key, value)?,
            "model.ffn" => {
                m.ffn = match value {
                    "plain" => FfnKind::Plain,
                    "gated" => FfnKind::Gated,
                    _ => return Err(Error::Config(format!("{key}: expected plain or gated, got {value:?}"))),
                }
            }
            "model.norm_eps" => m.norm_eps = num(key, value)?,
            "model.seed" => m.seed = num(key, value)?,
            "adapter.rank" => a.rank = num(key, value)?,
            "adapter.alpha" => a.alpha = num(key, value)?,
            "adapter.layer_fraction" => a.layer_fraction = num(key, value)?,
            "adapter.targets" => {
                a.targets = if value == "all" {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|s| FfnMatrix::parse(s.trim()).map_err(|e| ctx(key, e)))
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "trainer.mode" => t.mode = value.parse().map_err(|e| ctx(key, e))?,
            "trainer.k" => t.k = num(key, value)?,
            "trainer.eta_in" => t.eta_in = num(key, value)?,
            "trainer.inner_clip" => t.inner_clip = num(key, value)?,
            "trainer.lr" => t.lr = num(key, value)?,
            "trainer.schedule" => t.schedule = value.parse().map_err(|e| ctx(key, e))?,
            "trainer.warmup_fraction" => t.warmup_fraction = num(key, value)?,
            "trainer.weight_decay" => t.weight_decay = num(key, value)?,
            "trainer.beta1" => t.betas.0 = num(key, value)?,
            "trainer.beta2" => t.betas.1 = num(key, value)?,
            "trainer.outer_clip" => t.outer_clip = num(key, value)?,
            "trainer.epochs" => t.epochs = num(key, value)?,
            "trainer.batch_size" => t.batch_size = num(key, value)?,
            "trainer.seed" => t.seed = num(key, value)?,
            "trainer.trace_every" => t.trace_every = num(key, value)?,
            "task.kind" => task.kind = value.parse().map_err(|e| ctx(key, e))?,
            "task.seq_len" => task.seq_len = num(key, value)?,
            "task.depth" => {
                task.depth = if value == "random" { None } else { Some(num(key, value)?) }
            }
            "task.n_turns" => task.n_turns = num(key, value)?,
            "task.eval_fraction" => task.eval_fraction = num(key, value)?,
            "task.n_train" => self.n_train = num(key, value)?,
            "task.n_eval" => self.n_eval = num(key, value)?,
            "task.seed" => self.data_seed = num(key, value)?,
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "run.checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "run.log_timing" => self.log_timing = boolean(key, value)?,
            "run.depth_bins" => self.depth_bins = num(key, value)?,
            "run.all_queries" => self.all_queries = boolean(key, value)?,
            "preset" => {
                return Err(Error::Config("preset: only allowed on the first line".into()))
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every cross-field check, run before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.adapters.validate(&self.model)?;
        self.task.validate().map_err(|e| ctx("task", e))?;
        if self.task.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "task.seq_len {} exceeds model.max_seq_len {}",
                self.task.seq_len, self.model.max_seq_len
            )));
        }
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config("task vocabulary differs from model.vocab_size".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("task.n_train must be at least 1".into()));
        }
        if self.depth_bins == 0 {
            return Err(Error::Config("run.depth_bins must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let (m, a, t, task) = (&self.model, &self.adapters, &self.trainer, &self.task);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.n_layers", m.n_layers.to_string());
        kv("model.n_heads", m.n_heads.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.d_ff", m.d_ff.to_string());
        kv("model.vocab_size", m.vocab_size.to_string());
        kv("model.max_seq_len", m.max_seq_len.to_string());
        kv("model.rope", m.rope.to_string());
        kv("model.rope_base", m.rope_base.to_string());
        kv(
            "model.ffn",
            match m.ffn {
                FfnKind::Plain => "plain",
                FfnKind::Gated => "gated",
            }
            .into(),
        );
        kv("model.norm_eps", m.norm_eps.to_string());
        kv("model.seed", m.seed.to_string());
        kv("adapter.rank", a.rank.to_string());
        kv("adapter.alpha", a.alpha.to_string());
        kv("adapter.layer_fraction", a.layer_fraction.to_string());
        kv(
            "adapter.targets",
            match &a.targets {
                None => "all".into(),
                Some(t) => t.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            },
        );
        kv("trainer.mode", t.mode.name().into());
        kv("trainer.k", t.k.to_string());
        kv("trainer.eta_in", t.eta_in.to_string());
        kv("trainer.inner_clip", t.inner_clip.to_string());
        kv("trainer.lr", t.lr.to_string());
        kv("trainer.schedule", t.schedule.to_string());
        kv("trainer.warmup_fraction", t.warmup_fraction.to_string());
        kv("trainer.weight_decay", t.weight_decay.to_string());
        kv("trainer.beta1", t.betas.0.to_string());
        kv("trainer.beta2", t.betas.1.to_string());
        kv("trainer.outer_clip", t.outer_clip.to_string());
        kv("trainer.epochs", t.epochs.to_string());
        kv("trainer.batch_size", t.batch_size.to_string());
        kv("trainer.seed", t.seed.to_string());
        kv("trainer.trace_every", t.trace_every.to_string());
        kv("task.kind", task.kind.name().into());
        kv("task.seq_len", task.seq_len.to_string());
        kv(
            "task.depth",
            task.depth.map_or("random".into(), |d: Float| d.to_string()),
        );
        kv("task.n_turns", task.n_turns.to_string());
        kv("task.eval_fraction", task.eval_fraction.to_string());
        kv("task.n_train", self.n_train.to_string());
        kv("task.n_eval", self.n_eval.to_string());
        kv("task.seed", self.data_seed.to_string());
        kv("run.out_dir", self.out_dir.display().to_string());
        kv("run.checkpoint_every", self.checkpoint_every.to_string());
        kv("run.log_timing", self.log_timing.to_string());
        kv("run.depth_bins", self.depth_bins.to_string());
        kv("run.all_queries", self.all_queries.to_string());
        s
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.trainer.mode = mode;
        self
    }

    /// Override every seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.trainer.seed = seed;
        self.model.seed = seed;
        self
    }
}

/// Parses a value list for a sweep axis.
pub fn parse_values(text: &str) -> Result<Vec<Float>> {
    text.split(',')
        .map(|s| num::<Float>("--values", s.trim()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LayerFraction,
    K,
    EtaIn,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer_fraction" | "lf" => Ok(SweepAxis::LayerFraction),
            "K" | "k" => Ok(SweepAxis::K),
            "eta_in" => Ok(SweepAxis::EtaIn),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; expected layer_fraction, K or eta_in"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LayerFraction => "layer_fraction",
            SweepAxis::K => "K",
            SweepAxis::EtaIn => "eta_in",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: Float) -> Result<()> {
        match self {
            SweepAxis::LayerFraction => cfg.adapters.layer_fraction = value,
            SweepAxis::K => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("K must be a non-negative integer, got {value}")));
                }
                cfg.trainer.k = value as usize;
            }
            SweepAxis::EtaIn => cfg.trainer.eta_in = value,
        }
        cfg.validate()
    }
}
