//! Attention-dilution measurements over a recorded [`AttentionTrace`].
//!
//! All metrics average unweighted over heads, then over the selected query
//! rows, then over layers. Rows are used as the softmax produced them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Segmentation;
use crate::model::AttentionTrace;
use crate::svg;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_SINK_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionTag {
    SinkWindow,
    SystemUser,
    ToolResponse,
    AssistantResponse,
    Filler,
}

impl RegionTag {
    pub const ALL: [RegionTag; 5] = [
        RegionTag::SinkWindow,
        RegionTag::SystemUser,
        RegionTag::ToolResponse,
        RegionTag::AssistantResponse,
        RegionTag::Filler,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegionTag::SinkWindow => "SinkWindow",
            RegionTag::SystemUser => "SystemUser",
            RegionTag::ToolResponse => "ToolResponse",
            RegionTag::AssistantResponse => "AssistantResponse",
            RegionTag::Filler => "Filler",
        }
    }
}

impl fmt::Display for RegionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegionTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown region tag {s:?}")))
    }
}

/// Half-open key range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub tag: RegionTag,
    pub start: usize,
    pub end: usize,
}

/// Ordered, disjoint tagged ranges over key positions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionMap {
    pub regions: Vec<Region>,
    pub sink_window: usize,
}

impl RegionMap {
    pub fn new(regions: Vec<Region>, sink_window: usize) -> Self {
        Self {
            regions,
            sink_window,
        }
    }

    /// Checks ordering, disjointness, bounds and the sink-window rule.
    pub fn validate(&self, t: usize) -> Result<()> {
        let mut prev_end = 0;
        for (k, r) in self.regions.iter().enumerate() {
            if r.start >= r.end {
                return Err(Error::Config(format!("region {k} ({}) is empty", r.tag)));
            }
            if r.end > t {
                return Err(Error::Config(format!(
                    "region {k} ({}) ends at {} beyond sequence length {t}",
                    r.tag, r.end
                )));
            }
            if k > 0 && r.start < prev_end {
                return Err(Error::Config(format!(
                    "region {k} ({}) overlaps or precedes its predecessor",
                    r.tag
                )));
            }
            if r.tag == RegionTag::SinkWindow && (r.start != 0 || r.end != self.sink_window.min(t)) {
                return Err(Error::Config(format!(
                    "sink window must cover [0, {})",
                    self.sink_window.min(t)
                )));
            }
            prev_end = r.end;
        }
        Ok(())
    }

    /// True when the regions tile `[0, t)` with no gap.
    pub fn is_partition(&self, t: usize) -> bool {
        let mut next = 0;
        for r in &self.regions {
            if r.start != next {
                return false;
            }
            next = r.end;
        }
        next == t
    }

    /// Tag owning key `j`, if any.
    pub fn tag_at(&self, j: usize) -> Option<RegionTag> {
        self.regions
            .iter()
            .find(|r| r.start <= j && j < r.end)
            .map(|r| r.tag)
    }

    /// Region start offsets other than 0, for drawing boundaries.
    pub fn boundaries(&self) -> Vec<usize> {
        self.regions
            .iter()
            .map(|r| r.start)
            .filter(|&s| s > 0)
            .collect()
    }
}

/// Which query rows enter the averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QuerySet {
    #[default]
    Response,
    All,
}

pub fn query_rows(seg: &Segmentation, set: QuerySet) -> Result<Vec<usize>> {
    let rows = match set {
        QuerySet::Response => seg.response_positions(),
        QuerySet::All => (0..seg.len()).collect(),
    };
    if rows.is_empty() {
        return Err(Error::Task("no response positions to use as queries".into()));
    }
    Ok(rows)
}

fn check_trace(trace: &AttentionTrace, seg: &Segmentation) -> Result<()> {
    if !trace.enabled || trace.layers.is_empty() || trace.layers.iter().any(Vec::is_empty) {
        return Err(Error::Usage("attention trace is empty or was not enabled".into()));
    }
    let t = seg.len();
    for (l, heads) in trace.layers.iter().enumerate() {
        for h in heads {
            if h.shape() != [t, t] {
                return Err(Error::Dimension(format!(
                    "layer {l} trace is {:?}, segmentation has length {t}",
                    h.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Per-layer mean over heads and query rows of `Σ_{j ∈ keys} α[i, j]`.
fn mass_per_layer(
    trace: &AttentionTrace,
    queries: &[usize],
    keys: impl Fn(usize) -> bool,
) -> Vec<Float> {
    trace
        .layers
        .iter()
        .map(|heads| {
            let mut acc = 0.0;
            for h in heads {
                let t = h.cols();
                for &i in queries {
                    let row = &h.data()[i * t..(i + 1) * t];
                    acc += row
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| keys(*j))
                        .map(|(_, v)| *v)
                        .sum::<Float>();
                }
            }
            acc / (heads.len() * queries.len()) as Float
        })
        .collect()
}

fn mean(xs: &[Float]) -> Float {
    xs.iter().sum::<Float>() / xs.len() as Float
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkMass {
    pub per_layer: Vec<Float>,
    pub mean: Float,
}

/// Attention mass on keys `0..w` from the selected queries.
pub fn sink_mass(
    trace: &AttentionTrace,
    seg: &Segmentation,
    w: usize,
    set: QuerySet,
) -> Result<SinkMass> {
    check_trace(trace, seg)?;
    let queries = query_rows(seg, set)?;
    let per_layer = mass_per_layer(trace, &queries, |j| j < w);
    Ok(SinkMass {
        mean: mean(&per_layer),
        per_layer,
    })
}

/// Fraction of attention landing in each region. Keys not covered by any
/// region are credited to `Filler`.
pub fn region_budget(
    trace: &AttentionTrace,
    seg: &Segmentation,
    regions: &RegionMap,
    set: QuerySet,
) -> Result<BTreeMap<RegionTag, Float>> {
    check_trace(trace, seg)?;
    regions.validate(seg.len())?;
    let queries = query_rows(seg, set)?;
    let mut out = BTreeMap::new();
    for r in &regions.regions {
        let m = mean(&mass_per_layer(trace, &queries, |j| r.start <= j && j < r.end));
        *out.entry(r.tag).or_insert(0.0) += m;
    }
    if !regions.is_partition(seg.len()) {
        let rest = mean(&mass_per_layer(trace, &queries, |j| regions.tag_at(j).is_none()));
        *out.entry(RegionTag::Filler).or_insert(0.0) += rest;
    }
    Ok(out)
}

/// Mean attention per key position.
pub fn positional_profile(
    trace: &AttentionTrace,
    seg: &Segmentation,
    set: QuerySet,
) -> Result<Vec<Float>> {
    check_trace(trace, seg)?;
    let queries = query_rows(seg, set)?;
    let t = seg.len();
    let mut profile = vec![0.0; t];
    for heads in &trace.layers {
        let scale = 1.0 / (heads.len() * queries.len() * trace.layers.len()) as Float;
        for h in heads {
            for &i in &queries {
                for (p, v) in profile.iter_mut().zip(&h.data()[i * t..(i + 1) * t]) {
                    *p += v * scale;
                }
            }
        }
    }
    Ok(profile)
}

/// Share of attention on context content (system/user and tool turns).
pub fn context_engagement(budget: &BTreeMap<RegionTag, Float>) -> Float {
    [RegionTag::SystemUser, RegionTag::ToolResponse]
        .iter()
        .filter_map(|t| budget.get(t))
        .sum()
}

/// Default layer for heatmaps: the middle layer, 0-based `⌈n/2⌉ - 1`
/// clamped into range.
pub fn representative_layer(n_layers: usize) -> usize {
    n_layers.div_ceil(2).saturating_sub(1).min(n_layers.saturating_sub(1))
}

pub fn matrix_to_csv(m: &Tensor) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Tensor> {
    let rows: Vec<Vec<Float>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|c| {
                    c.trim()
                        .parse::<Float>()
                        .map_err(|e| Error::Parse(format!("csv row {i}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Writes `<prefix>.csv` (query rows) and `<prefix>.svg` for one layer's
/// head-averaged attention.
pub fn heatmap_export(
    trace: &AttentionTrace,
    layer: usize,
    regions: Option<&RegionMap>,
    prefix: &Path,
    title: &str,
) -> Result<Tensor> {
    if layer >= trace.n_layers() {
        return Err(Error::Usage(format!(
            "layer {layer} out of range for {} traced layers",
            trace.n_layers()
        )));
    }
    let m = trace.head_mean(layer)?;
    std::fs::write(prefix.with_extension("csv"), matrix_to_csv(&m))?;
    let bounds = regions.map(RegionMap::boundaries).unwrap_or_default();
    std::fs::write(prefix.with_extension("svg"), svg::heatmap(title, &m, &bounds))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub sink_mass_per_layer: Vec<Float>,
    pub sink_mass_mean: Float,
    pub region_budget: BTreeMap<RegionTag, Float>,
    pub positional_profile: Vec<Float>,
    pub context_engagement: Float,
    pub w: usize,
    pub layer_count: usize,
    /// Whether scalar metrics are averaged over all traced layers.
    pub layer_mean: bool,
}

pub fn summarize(
    trace: &AttentionTrace,
    seg: &Segmentation,
    regions: &RegionMap,
    w: usize,
    set: QuerySet,
) -> Result<AttentionSummary> {
    let sink = sink_mass(trace, seg, w, set)?;
    let budget = region_budget(trace, seg, regions, set)?;
    Ok(AttentionSummary {
        sink_mass_per_layer: sink.per_layer,
        sink_mass_mean: sink.mean,
        context_engagement: context_engagement(&budget),
        region_budget: budget,
        positional_profile: positional_profile(trace, seg, set)?,
        w,
        layer_count: trace.n_layers(),
        layer_mean: true,
    })
}
