//! `analyze`: traced forwards under the causal and the bidirectional-context
//! masks, averaged over samples, with CSV and SVG figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use focusft::diagnostics::{
    heatmap_export, representative_layer, summarize, AttentionSummary, QuerySet, RegionTag,
    DEFAULT_SINK_WINDOW,
};
use focusft::masking::{build_causal_mask, build_focusft_mask};
use focusft::model::{AttentionTrace, ModelWeights};
use focusft::svg::{bar_chart, line_plot, Series};
use focusft::taskgen::Sample;
use focusft::{Error, Float, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::{ensure_dir, write_json};

pub const ANALYSIS_FILE: &str = "analysis.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Bidirectional,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Causal => "causal",
            MaskKind::Bidirectional => "focusft",
        }
    }

    fn build(self, s: &Sample) -> Result<Tensor> {
        match self {
            MaskKind::Causal => build_causal_mask(s.len()),
            MaskKind::Bidirectional => Ok(build_focusft_mask(&s.segmentation)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub samples: usize,
    pub heatmap_layer: usize,
    pub causal: AttentionSummary,
    pub focusft: AttentionSummary,
}

#[derive(Debug, Clone, Copy)]
pub struct AnalyzeOptions {
    pub w: usize,
    pub queries: QuerySet,
    pub layer: Option<usize>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            w: DEFAULT_SINK_WINDOW,
            queries: QuerySet::Response,
            layer: None,
        }
    }
}

fn trace(weights: &ModelWeights, s: &Sample, mask: &Tensor) -> Result<AttentionTrace> {
    let mut t = AttentionTrace::new(weights.config.n_layers);
    weights.logits(&s.tokens, mask, None, Some(&mut t))?;
    Ok(t)
}

/// Unweighted mean of per-sample summaries.
fn average(parts: &[AttentionSummary]) -> AttentionSummary {
    let n = parts.len() as Float;
    let first = &parts[0];
    let mean_vec = |get: &dyn Fn(&AttentionSummary) -> &Vec<Float>| -> Vec<Float> {
        (0..get(first).len())
            .map(|i| parts.iter().map(|p| get(p)[i]).sum::<Float>() / n)
            .collect()
    };
    let sink = mean_vec(&|p| &p.sink_mass_per_layer);
    let mut budget: BTreeMap<RegionTag, Float> = BTreeMap::new();
    for p in parts {
        for (k, v) in &p.region_budget {
            *budget.entry(*k).or_insert(0.0) += v / n;
        }
    }
    AttentionSummary {
        sink_mass_mean: sink.iter().sum::<Float>() / sink.len() as Float,
        sink_mass_per_layer: sink,
        context_engagement: focusft::diagnostics::context_engagement(&budget),
        region_budget: budget,
        positional_profile: mean_vec(&|p| &p.positional_profile),
        w: first.w,
        layer_count: first.layer_count,
        layer_mean: first.layer_mean,
    }
}

fn per_mask(weights: &ModelWeights, samples: &[Sample], kind: MaskKind, opts: &AnalyzeOptions) -> Result<AttentionSummary> {
    let mut parts = Vec::with_capacity(samples.len());
    for s in samples {
        let t = trace(weights, s, &kind.build(s)?)?;
        parts.push(summarize(&t, &s.segmentation, &s.regions, opts.w, opts.queries)?);
    }
    Ok(average(&parts))
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut s = format!("{header}\n");
    for r in rows {
        let _ = writeln!(s, "{r}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn run(weights: &ModelWeights, samples: &[Sample], out: &Path, opts: &AnalyzeOptions) -> Result<Analysis> {
    if samples.is_empty() {
        return Err(Error::Usage("analyze needs at least one sample".into()));
    }
    let t = samples[0].len();
    if samples.iter().any(|s| s.len() != t) {
        return Err(Error::Usage("analyze needs samples of one length".into()));
    }
    for s in samples {
        s.validate(weights.config.vocab_size)?;
    }
    let n_layers = weights.config.n_layers;
    let layer = opts.layer.unwrap_or_else(|| representative_layer(n_layers));
    if layer >= n_layers {
        return Err(Error::Usage(format!("layer {layer} out of range for {n_layers} layers")));
    }
    ensure_dir(out)?;
    let causal = per_mask(weights, samples, MaskKind::Causal, opts)?;
    let focusft = per_mask(weights, samples, MaskKind::Bidirectional, opts)?;

    write_csv(
        &out.join("sink_per_layer.csv"),
        "layer,causal,focusft",
        (0..n_layers).map(|l| format!("{l},{},{}", causal.sink_mass_per_layer[l], focusft.sink_mass_per_layer[l])),
    )?;
    let curve = |s: &AttentionSummary| s.sink_mass_per_layer.iter().enumerate().map(|(l, v)| (l as f64, *v as f64)).collect();
    std::fs::write(
        out.join("sink_per_layer.svg"),
        line_plot(
            "Attention sink mass per layer",
            "layer",
            "sink mass",
            &[Series { name: "causal", points: curve(&causal) }, Series { name: "focusft", points: curve(&focusft) }],
        ),
    )?;

    let tags: Vec<RegionTag> = RegionTag::ALL.to_vec();
    let get = |s: &AttentionSummary, t: &RegionTag| s.region_budget.get(t).copied().unwrap_or(0.0);
    write_csv(
        &out.join("region_budget.csv"),
        "region,causal,focusft",
        tags.iter().map(|t| format!("{},{},{}", t.name(), get(&causal, t), get(&focusft, t))),
    )?;
    let names: Vec<&str> = tags.iter().map(|t| t.name()).collect();
    std::fs::write(
        out.join("region_budget.svg"),
        bar_chart(
            "Attention budget by region",
            &names,
            &[
                ("causal", tags.iter().map(|t| get(&causal, t) as f64).collect()),
                ("focusft", tags.iter().map(|t| get(&focusft, t) as f64).collect()),
            ],
        ),
    )?;

    write_csv(
        &out.join("positional_profile.csv"),
        "position,causal,focusft",
        (0..t).map(|j| format!("{j},{},{}", causal.positional_profile[j], focusft.positional_profile[j])),
    )?;
    let profile = |s: &AttentionSummary| s.positional_profile.iter().enumerate().map(|(j, v)| (j as f64, *v as f64)).collect();
    std::fs::write(
        out.join("positional_profile.svg"),
        line_plot(
            "Positional attention distribution",
            "key position",
            "mean attention",
            &[Series { name: "causal", points: profile(&causal) }, Series { name: "focusft", points: profile(&focusft) }],
        ),
    )?;

    let s0 = &samples[0];
    for kind in [MaskKind::Causal, MaskKind::Bidirectional] {
        let tr = trace(weights, s0, &kind.build(s0)?)?;
        let title = format!("{} mask, layer {layer}, head mean", kind.name());
        heatmap_export(&tr, layer, Some(&s0.regions), &out.join(format!("heatmap_{}", kind.name())), &title)?;
    }

    let analysis = Analysis {
        samples: samples.len(),
        heatmap_layer: layer,
        causal,
        focusft,
    };
    write_json(&out.join(ANALYSIS_FILE), &analysis)?;
    Ok(analysis)
}
