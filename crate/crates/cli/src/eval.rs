//! `eval`: greedy-decode accuracy with per-kind and per-depth breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use focusft::bilevel::{evaluate, EvalRecord, EvalReport};
use focusft::model::ModelWeights;
use focusft::taskgen::Sample;
use focusft::{Error, Float, Result};
use serde::{Deserialize, Serialize};

use crate::{ensure_dir, write_json};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";
pub const DEPTH_FILE: &str = "depth_bins.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<Float>,
}

impl Bucket {
    fn new(label: String, records: &[&EvalRecord]) -> Self {
        let correct = records.iter().filter(|r| r.correct).count();
        Self {
            label,
            n: records.len(),
            correct,
            accuracy: (!records.is_empty()).then(|| correct as Float / records.len() as Float),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: Float,
    pub n: usize,
    pub per_kind: Vec<Bucket>,
    /// One row per configured bin over `[0, 1]`; samples without a depth
    /// are left out.
    pub depth_bins: Vec<Bucket>,
}

/// Bin index of a relative depth; 1.0 falls in the last bin.
pub fn depth_bin(depth: Float, bins: usize) -> usize {
    ((depth.clamp(0.0, 1.0) * bins as Float) as usize).min(bins - 1)
}

pub fn summarize(report: &EvalReport, bins: usize) -> Result<EvalSummary> {
    if bins == 0 {
        return Err(Error::Config("depth bins must be at least 1".into()));
    }
    let mut kinds: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in &report.records {
        kinds.entry(r.kind.name().to_string()).or_default().push(r);
    }
    let mut by_bin: Vec<Vec<&EvalRecord>> = vec![Vec::new(); bins];
    for r in &report.records {
        if let Some(d) = r.depth {
            by_bin[depth_bin(d, bins)].push(r);
        }
    }
    let width = 1.0 / bins as Float;
    Ok(EvalSummary {
        accuracy: report.accuracy,
        n: report.records.len(),
        per_kind: kinds.into_iter().map(|(k, rs)| Bucket::new(k, &rs)).collect(),
        depth_bins: by_bin
            .iter()
            .enumerate()
            .map(|(i, rs)| {
                let label = format!("{:.3}-{:.3}", i as Float * width, (i + 1) as Float * width);
                Bucket::new(label, rs)
            })
            .collect(),
    })
}

/// Evaluates and writes predictions, the JSON report and the depth table.
pub fn run(weights: &ModelWeights, samples: &[Sample], bins: usize, out: &Path) -> Result<EvalSummary> {
    for s in samples {
        s.validate(weights.config.vocab_size)?;
    }
    let report = evaluate(weights, samples)?;
    let summary = summarize(&report, bins)?;
    ensure_dir(out)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join(PREDICTIONS_FILE))?);
    for r in &report.records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    write_json(&out.join(REPORT_FILE), &summary)?;
    let mut csv = String::from("bin,n,correct,accuracy\n");
    for b in &summary.depth_bins {
        let acc = b.accuracy.map_or(String::new(), |a| a.to_string());
        let _ = writeln!(csv, "{},{},{},{acc}", b.label, b.n, b.correct);
    }
    std::fs::write(out.join(DEPTH_FILE), csv)?;
    Ok(summary)
}
