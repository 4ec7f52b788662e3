//! Token segmentation and the attention masks built from it.
//!
//! Positions are 0-based. The bidirectional-context mask lets every context
//! position see every other context position (across all context turns,
//! in both directions), lets response positions see everything at or before
//! themselves, and hides everything else. Context queries never see response
//! keys, not even earlier ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{is_masked, MASK_NEG};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Context,
    Response,
}

impl Label {
    pub fn as_char(self) -> char {
        match self {
            Label::Context => 'C',
            Label::Response => 'R',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c {
            'C' | 'c' => Ok(Label::Context),
            'R' | 'r' => Ok(Label::Response),
            other => Err(Error::Parse(format!("unknown label {other:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Context => "context",
            Label::Response => "response",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" | "C" => Ok(Label::Context),
            "response" | "R" => Ok(Label::Response),
            other => Err(Error::Parse(format!("unknown label {other:?}"))),
        }
    }
}

/// Per-token context/response labels with turn ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegRecord", into = "SegRecord")]
pub struct Segmentation {
    labels: Vec<Label>,
    turn_ids: Vec<usize>,
}

/// Serialized form: compact `C`/`R` string plus turn ids.
#[derive(Serialize, Deserialize)]
struct SegRecord {
    labels: String,
    turn_ids: Vec<usize>,
}

impl From<Segmentation> for SegRecord {
    fn from(s: Segmentation) -> Self {
        SegRecord {
            labels: s.compact(),
            turn_ids: s.turn_ids,
        }
    }
}

impl TryFrom<SegRecord> for Segmentation {
    type Error = Error;

    fn try_from(r: SegRecord) -> Result<Self> {
        let labels = r.labels.chars().map(Label::from_char).collect::<Result<_>>()?;
        Segmentation::new(labels, r.turn_ids)
    }
}

impl Segmentation {
    /// Validates: equal lengths, non-empty, non-decreasing turn ids, and a
    /// turn boundary wherever the label changes.
    pub fn new(labels: Vec<Label>, turn_ids: Vec<usize>) -> Result<Self> {
        if labels.len() != turn_ids.len() {
            return Err(Error::Input(format!(
                "{} labels but {} turn ids",
                labels.len(),
                turn_ids.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Input("empty segmentation".into()));
        }
        for i in 1..labels.len() {
            if turn_ids[i] < turn_ids[i - 1] {
                return Err(Error::Input(format!("turn ids decrease at position {i}")));
            }
            if labels[i] != labels[i - 1] && turn_ids[i] == turn_ids[i - 1] {
                return Err(Error::Input(format!(
                    "label changes inside turn {} at position {i}",
                    turn_ids[i]
                )));
            }
        }
        Ok(Self { labels, turn_ids })
    }

    /// One turn per maximal run of equal labels.
    pub fn from_labels(labels: Vec<Label>) -> Result<Self> {
        let mut turn_ids = Vec::with_capacity(labels.len());
        let mut turn = 0;
        for i in 0..labels.len() {
            if i > 0 && labels[i] != labels[i - 1] {
                turn += 1;
            }
            turn_ids.push(turn);
        }
        Self::new(labels, turn_ids)
    }

    /// Parse a compact `CCCRR` string.
    pub fn from_compact(s: &str) -> Result<Self> {
        let labels = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(Label::from_char)
            .collect::<Result<Vec<_>>>()?;
        Self::from_labels(labels)
    }

    pub fn compact(&self) -> String {
        self.labels.iter().map(|l| l.as_char()).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn turn_ids(&self) -> &[usize] {
        &self.turn_ids
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn is_context(&self, i: usize) -> bool {
        self.labels[i] == Label::Context
    }

    pub fn context_positions(&self) -> Vec<usize> {
        self.positions(Label::Context)
    }

    pub fn response_positions(&self) -> Vec<usize> {
        self.positions(Label::Response)
    }

    fn positions(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Keep the first `len` positions.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        let len = len.min(self.len());
        Self::new(self.labels[..len].to_vec(), self.turn_ids[..len].to_vec())
    }

    /// `index<TAB>label<TAB>turn_id`, one line per token.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (l, t)) in self.labels.iter().zip(&self.turn_ids).enumerate() {
            out.push_str(&format!("{i}\t{l}\t{t}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut turns = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            }
            let index: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad index", lineno + 1)))?;
            if index != labels.len() {
                return Err(Error::Parse(format!(
                    "line {}: index {index} out of sequence",
                    lineno + 1
                )));
            }
            labels.push(fields[1].parse()?);
            turns.push(
                fields[2]
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad turn id", lineno + 1)))?,
            );
        }
        Self::new(labels, turns)
    }
}

/// Whether query `i` may attend to key `j` under the bidirectional-context rule.
pub fn focusft_visible(seg: &Segmentation, i: usize, j: usize) -> bool {
    match seg.label(i) {
        Label::Context => seg.is_context(j),
        Label::Response => j <= i,
    }
}

fn mask_from(t: usize, visible: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            if !visible(i, j) {
                m.set(i, j, MASK_NEG);
            }
        }
    }
    m
}

thread_local! {
    static FOCUSFT_BUILT: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of bidirectional-context masks built on this thread so far.
pub fn focusft_masks_built() -> u64 {
    FOCUSFT_BUILT.with(|c| c.get())
}

pub fn build_focusft_mask(seg: &Segmentation) -> Tensor {
    FOCUSFT_BUILT.with(|c| c.set(c.get() + 1));
    mask_from(seg.len(), |i, j| focusft_visible(seg, i, j))
}

pub fn build_causal_mask(t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Input("causal mask needs at least one position".into()));
    }
    Ok(mask_from(t, |i, j| j <= i))
}

/// A cell where a mask disagrees with the bidirectional-context rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub query: usize,
    pub key: usize,
    pub expected: Float,
    pub found: Float,
}

/// Every cell where `mask` differs from `build_focusft_mask(seg)`.
pub fn validate_mask(mask: &Tensor, seg: &Segmentation) -> Result<Vec<Violation>> {
    let t = seg.len();
    if mask.shape() != [t, t] {
        return Err(Error::Dimension(format!(
            "mask {:?} vs segmentation of length {t}",
            mask.shape()
        )));
    }
    let mut out = Vec::new();
    for i in 0..t {
        for j in 0..t {
            let want_visible = focusft_visible(seg, i, j);
            let found = mask.at(i, j);
            let ok = if want_visible {
                found == 0.0
            } else {
                is_masked(found)
            };
            if !ok {
                out.push(Violation {
                    query: i,
                    key: j,
                    expected: if want_visible { 0.0 } else { MASK_NEG },
                    found,
                });
            }
        }
    }
    Ok(out)
}
