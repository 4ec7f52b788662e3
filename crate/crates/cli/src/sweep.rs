//! `sweep`: one training run per axis value, run sequentially with the
//! base config's seeds.

use std::fmt::Write as _;
use std::path::Path;

use focusft::config::{RunConfig, SweepAxis};
use focusft::svg::{line_plot, Series};
use focusft::{Float, Result};
use serde::{Deserialize, Serialize};

use crate::{ensure_dir, train};

pub const TABLE_FILE: &str = "sweep.csv";
pub const PLOT_FILE: &str = "sweep.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: Float,
    pub final_loss: Float,
    pub eval_accuracy: Option<Float>,
    pub run_dir: String,
}

/// Sub-directory name for one value, e.g. `layer_fraction=0.5`.
pub fn run_dir_name(axis: SweepAxis, value: Float) -> String {
    format!("{}={value}", axis.name())
}

/// Every config is built and validated before the first run starts.
pub fn run(base: &RunConfig, axis: SweepAxis, values: &[Float], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(focusft::Error::Usage("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, v)?;
            cfg.out_dir = out.join(run_dir_name(axis, v));
            Ok(cfg)
        })
        .collect::<Result<_>>()?;
    ensure_dir(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for (cfg, &value) in configs.iter().zip(values) {
        let outcome = train::run(cfg)?;
        rows.push(SweepRow {
            value,
            final_loss: outcome.summary.final_loss,
            eval_accuracy: outcome.summary.eval_accuracy,
            run_dir: run_dir_name(axis, value),
        });
    }
    let mut csv = format!("{},final_loss,eval_accuracy,run_dir\n", axis.name());
    for r in &rows {
        let acc = r.eval_accuracy.map_or(String::new(), |a| a.to_string());
        let _ = writeln!(csv, "{},{},{acc},{}", r.value, r.final_loss, r.run_dir);
    }
    std::fs::write(out.join(TABLE_FILE), csv)?;
    let points = rows
        .iter()
        .filter_map(|r| r.eval_accuracy.map(|a| (r.value as f64, a as f64)))
        .collect();
    std::fs::write(
        out.join(PLOT_FILE),
        line_plot(
            &format!("Eval accuracy vs {}", axis.name()),
            axis.name(),
            "accuracy",
            &[Series { name: "eval accuracy", points }],
        ),
    )?;
    Ok(rows)
}
