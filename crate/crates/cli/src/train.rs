//! `train`: one run directory per invocation.
//!
//! Layout:
//! - `config.cfg` canonical config, written before any compute
//! - `data/train.jsonl`, `data/eval.jsonl`
//! - `metrics.jsonl` one line per outer step (deterministic)
//! - `timing.jsonl` wall-clock sidecar
//! - `attention.jsonl` traced steps when `trainer.trace_every > 0`
//! - `checkpoints/step-NNNNNN/` periodic, `checkpoint/` final
//! - `summary.json`

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use focusft::bilevel::{evaluate, mean_loss, train, StepReport, TrainSetup};
use focusft::config::RunConfig;
use focusft::model::{init_model, ModelWeights};
use focusft::taskgen::{make_splits, write_jsonl, Sample};
use focusft::timing::Stopwatch;
use focusft::{Error, Float, Result};
use serde::{Deserialize, Serialize};

use crate::{ensure_dir, write_json};

pub const CONFIG_FILE: &str = "config.cfg";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const ATTENTION_FILE: &str = "attention.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: String,
    pub steps: usize,
    /// Mean training-set loss of the freshly initialized model.
    pub initial_loss: Float,
    /// Mean training-set loss after the last step.
    pub final_loss: Float,
    pub loss_ratio: Float,
    /// Mean outer loss over the last epoch's steps.
    pub last_epoch_mean: Float,
    pub eval_accuracy: Option<Float>,
    pub train_seconds: f64,
    pub median_step_ms: f64,
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub weights: ModelWeights,
    pub reports: Vec<StepReport>,
    pub summary: TrainSummary,
    pub train_set: Vec<Sample>,
    pub eval_set: Vec<Sample>,
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn step_checkpoint_dir(run: &Path, step: usize) -> PathBuf {
    run.join("checkpoints").join(format!("step-{step:06}"))
}

/// Trains into `cfg.out_dir`. On a numerical abort the metrics written so
/// far and the last good θ (as `checkpoint/`) are kept before the error
/// is returned.
pub fn run(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    ensure_dir(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;

    let (train_set, eval_set) = make_splits(&cfg.task, cfg.n_train, cfg.n_eval, cfg.data_seed)?;
    ensure_dir(&dir.join("data"))?;
    write_jsonl(&dir.join("data/train.jsonl"), &train_set)?;
    write_jsonl(&dir.join("data/eval.jsonl"), &eval_set)?;

    let mut weights = init_model(&cfg.model)?;
    let mode = cfg.trainer.mode;
    let initial_loss = mean_loss(&weights, &train_set, mode)?;
    let setup = TrainSetup {
        trainer: cfg.trainer.clone(),
        adapters: cfg.adapters.clone(),
    };

    let mut metrics = open(&dir.join(METRICS_FILE))?;
    let mut timing = open(&dir.join(TIMING_FILE))?;
    let mut attention: Option<BufWriter<File>> = None;
    let clock = Stopwatch::start();
    let result = train(&mut weights, &train_set, &setup, |r, w| {
        writeln!(metrics, "{}", r.metrics_line(cfg.log_timing)?)?;
        writeln!(timing, "{}", r.timing_line())?;
        if let Some(summary) = &r.attention {
            if attention.is_none() {
                attention = Some(open(&dir.join(ATTENTION_FILE))?);
            }
            if let Some(f) = attention.as_mut() {
                let line = serde_json::json!({ "step": r.step, "summary": summary });
                writeln!(f, "{line}")?;
            }
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
            focusft::checkpoint::save(w, &step_checkpoint_dir(&dir, r.step))?;
        }
        Ok(())
    });
    let train_ms = clock.elapsed_ms();
    metrics.flush()?;
    timing.flush()?;
    if let Some(f) = attention.as_mut() {
        f.flush()?;
    }
    focusft::checkpoint::save(&weights, &dir.join(CHECKPOINT_DIR))?;
    let reports = result?;

    let final_loss = mean_loss(&weights, &train_set, mode)?;
    let last_epoch = cfg.trainer.epochs.saturating_sub(1);
    let tail: Vec<Float> = reports
        .iter()
        .filter(|r| r.epoch == last_epoch)
        .map(|r| r.outer_loss)
        .collect();
    let eval_accuracy = if eval_set.is_empty() {
        None
    } else {
        Some(evaluate(&weights, &eval_set)?.accuracy)
    };
    let step_ms: Vec<f64> = reports.iter().map(|r| r.t_total_ms).collect();
    let summary = TrainSummary {
        mode: mode.name().to_string(),
        steps: reports.len(),
        initial_loss,
        final_loss,
        loss_ratio: final_loss / initial_loss,
        last_epoch_mean: tail.iter().sum::<Float>() / tail.len().max(1) as Float,
        eval_accuracy,
        train_seconds: train_ms / 1000.0,
        median_step_ms: if step_ms.is_empty() { 0.0 } else { focusft::timing::median(&step_ms) },
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(TrainOutcome {
        dir,
        weights,
        reports,
        summary,
        train_set,
        eval_set,
    })
}

/// Re-parses a run directory's archived config.
pub fn archived_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::Usage(format!("{} has no {CONFIG_FILE}", dir.display())));
    }
    RunConfig::load(&path)
}
