//! Seeded synthetic long-context tasks over a small symbolic vocabulary.
//!
//! A fact is the three-token pattern `SEP head tail`. Samples are laid out
//! as a system turn, a run of tool turns holding filler with planted facts,
//! a user query turn, and an assistant response turn. The agentic layout
//! instead alternates context and response turns.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{Region, RegionMap, RegionTag, DEFAULT_SINK_WINDOW};
use crate::error::{Error, Result};
use crate::fastweights::derive_seed;
use crate::masking::{Label, Segmentation};
use crate::tensor::Float;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
pub const QUERY: usize = 3;
pub const SYS: usize = 4;
pub const USER: usize = 5;
pub const TOOL: usize = 6;
pub const ASSIST: usize = 7;
pub const N_SPECIAL: usize = 8;
const SPECIAL_NAMES: [&str; N_SPECIAL] = ["BOS", "EOS", "SEP", "QUERY", "SYS", "USER", "TOOL", "ASSIST"];

/// Tool turns in the haystack layout.
const N_TOOL_TURNS: usize = 4;
const SYSTEM_LEN: usize = 8;

/// Symbol table: specials, then keys, values, filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub n_filler: usize,
}

impl Vocab {
    /// Splits `size - 8` ids into keys and values (2/7 each) and filler.
    pub fn new(size: usize) -> Result<Self> {
        if size < 22 {
            return Err(Error::Config(format!(
                "vocab_size {size} too small; need at least 22 symbols"
            )));
        }
        let pool = size - N_SPECIAL;
        let n_keys = pool * 2 / 7;
        Ok(Self {
            size,
            n_keys,
            n_values: n_keys,
            n_filler: pool - 2 * n_keys,
        })
    }

    pub fn key(&self, i: usize) -> usize {
        N_SPECIAL + i
    }

    pub fn value(&self, i: usize) -> usize {
        N_SPECIAL + self.n_keys + i
    }

    pub fn filler(&self, i: usize) -> usize {
        N_SPECIAL + self.n_keys + self.n_values + i
    }

    pub fn is_key(&self, t: usize) -> bool {
        (N_SPECIAL..N_SPECIAL + self.n_keys).contains(&t)
    }

    pub fn is_value(&self, t: usize) -> bool {
        (self.value(0)..self.value(0) + self.n_values).contains(&t)
    }

    pub fn is_filler(&self, t: usize) -> bool {
        (self.filler(0)..self.size).contains(&t)
    }

    /// Printable name such as `QUERY`, `k3`, `v0`, `f12`.
    pub fn symbol(&self, t: usize) -> String {
        if t < N_SPECIAL {
            SPECIAL_NAMES[t].to_string()
        } else if self.is_key(t) {
            format!("k{}", t - self.key(0))
        } else if self.is_value(t) {
            format!("v{}", t - self.value(0))
        } else if self.is_filler(t) {
            format!("f{}", t - self.filler(0))
        } else {
            format!("<{t}>")
        }
    }

    fn random_filler(&self, rng: &mut ChaCha8Rng) -> usize {
        self.filler(rng.random_range(0..self.n_filler))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    SingleFact,
    TwoFact,
    MultiValue,
    Aggregation,
    /// Alternating context and response turns, one retrieval per turn.
    Agentic,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::SingleFact,
        TaskKind::TwoFact,
        TaskKind::MultiValue,
        TaskKind::Aggregation,
        TaskKind::Agentic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SingleFact => "single_fact",
            TaskKind::TwoFact => "two_fact",
            TaskKind::MultiValue => "multi_value",
            TaskKind::Aggregation => "aggregation",
            TaskKind::Agentic => "agentic",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub segmentation: Segmentation,
    /// Response positions holding the gold answer tokens.
    pub answer_span: Vec<usize>,
    /// Context positions of planted material.
    pub needle_positions: Vec<usize>,
    pub kind: TaskKind,
    pub seed: u64,
    /// Relative needle depth the generator aimed for, when applicable.
    pub depth: Option<Float>,
    /// (query key, first answer symbol) used for train/eval separation.
    pub fact_pair: (usize, usize),
    pub regions: RegionMap,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold(&self) -> Vec<usize> {
        self.answer_span.iter().map(|&p| self.tokens[p]).collect()
    }

    /// Structural checks tying tokens, labels, spans and regions together.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let t = self.tokens.len();
        if self.segmentation.len() != t {
            return Err(Error::Task(format!(
                "segmentation length {} != token count {t}",
                self.segmentation.len()
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&x| x >= vocab_size) {
            return Err(Error::Task(format!("token {bad} outside vocab of {vocab_size}")));
        }
        if self.answer_span.is_empty() {
            return Err(Error::Task("empty answer span".into()));
        }
        if self
            .answer_span
            .iter()
            .any(|&p| p >= t || self.segmentation.is_context(p))
        {
            return Err(Error::Task("answer span leaves the response set".into()));
        }
        if self
            .needle_positions
            .iter()
            .any(|&p| p >= t || !self.segmentation.is_context(p))
        {
            return Err(Error::Task("needle position outside the context set".into()));
        }
        self.regions.validate(t)
    }
}

/// Builds tokens, labels, turn ids and regions turn by turn.
struct Layout {
    tokens: Vec<usize>,
    labels: Vec<Label>,
    turn_ids: Vec<usize>,
    regions: Vec<Region>,
}

impl Layout {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            labels: Vec::new(),
            turn_ids: Vec::new(),
            regions: Vec::new(),
        }
    }

    /// Appends a turn and returns its start offset.
    fn push(&mut self, label: Label, tag: RegionTag, toks: Vec<usize>) -> usize {
        let start = self.tokens.len();
        let turn = self.turn_ids.last().map_or(0, |t| t + 1);
        self.labels.extend(std::iter::repeat_n(label, toks.len()));
        self.turn_ids.extend(std::iter::repeat_n(turn, toks.len()));
        self.tokens.extend(toks);
        self.regions.push(Region {
            tag,
            start,
            end: self.tokens.len(),
        });
        start
    }

    fn finish(self, w: usize) -> Result<(Vec<usize>, Segmentation, RegionMap)> {
        let mut regions = Vec::with_capacity(self.regions.len() + 1);
        for r in self.regions {
            if r.start == 0 {
                if r.end <= w {
                    return Err(Error::Config("first turn shorter than the sink window".into()));
                }
                regions.push(Region {
                    tag: RegionTag::SinkWindow,
                    start: 0,
                    end: w,
                });
                regions.push(Region { start: w, ..r });
            } else {
                regions.push(r);
            }
        }
        let seg = Segmentation::new(self.labels, self.turn_ids)?;
        Ok((self.tokens, seg, RegionMap::new(regions, w)))
    }
}

fn filler(vocab: &Vocab, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| vocab.random_filler(rng)).collect()
}

fn system_turn(vocab: &Vocab, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut t = vec![BOS, SYS];
    t.extend(filler(vocab, SYSTEM_LEN - 2, rng));
    t
}

/// Split `total` into `parts` near-equal lengths, longer parts first.
fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// Haystack skeleton: system turn, tool turns, query turn, response turn.
struct Haystack {
    layout: Layout,
    /// Absolute [start, end) of each tool turn, marker included.
    tool_turns: Vec<(usize, usize)>,
    hay_start: usize,
    hay_len: usize,
}

fn haystack(
    vocab: &Vocab,
    t: usize,
    query: Vec<usize>,
    response: Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Haystack> {
    let fixed = SYSTEM_LEN + query.len() + response.len();
    let min_turn = 8;
    if t < fixed + N_TOOL_TURNS * min_turn {
        return Err(Error::Config(format!(
            "sequence length {t} too small for the template (need {})",
            fixed + N_TOOL_TURNS * min_turn
        )));
    }
    let hay_len = t - fixed;
    let mut layout = Layout::new();
    layout.push(Label::Context, RegionTag::SystemUser, system_turn(vocab, rng));
    let hay_start = layout.tokens.len();
    let mut tool_turns = Vec::new();
    for len in split_even(hay_len, N_TOOL_TURNS) {
        let mut toks = vec![TOOL];
        toks.extend(filler(vocab, len - 1, rng));
        let s = layout.push(Label::Context, RegionTag::ToolResponse, toks);
        tool_turns.push((s, s + len));
    }
    layout.push(Label::Context, RegionTag::SystemUser, query);
    layout.push(Label::Response, RegionTag::AssistantResponse, response);
    Ok(Haystack {
        layout,
        tool_turns,
        hay_start,
        hay_len,
    })
}

impl Haystack {
    fn plant_fact(&mut self, at: usize, head: usize, tail: usize) -> [usize; 3] {
        self.layout.tokens[at] = SEP;
        self.layout.tokens[at + 1] = head;
        self.layout.tokens[at + 2] = tail;
        [at, at + 1, at + 2]
    }

    /// Random fact start inside tool turn `k`, after its marker.
    fn random_slot(&self, k: usize, width: usize, rng: &mut ChaCha8Rng) -> usize {
        let (s, e) = self.tool_turns[k];
        rng.random_range(s + 1..=e - width)
    }

    fn response_start(&self) -> usize {
        self.layout.regions.last().map_or(0, |r| r.start)
    }
}

fn distinct<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(count);
    all
}

fn pick_other<R: Rng>(rng: &mut R, n: usize, avoid: &[usize]) -> usize {
    loop {
        let x = rng.random_range(0..n);
        if !avoid.contains(&x) {
            return x;
        }
    }
}

fn check_depth(depth: Float) -> Result<()> {
    if !(0.0..=1.0).contains(&depth) || depth.is_nan() {
        return Err(Error::Config(format!("needle depth {depth} outside [0, 1]")));
    }
    Ok(())
}

/// One `SEP k v` fact at relative `depth` of the tool-turn region.
pub fn gen_single_fact(vocab: &Vocab, t: usize, depth: Float, seed: u64) -> Result<Sample> {
    check_depth(depth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = vocab.key(rng.random_range(0..vocab.n_keys));
    let v = vocab.value(rng.random_range(0..vocab.n_values));
    let mut h = haystack(vocab, t, vec![USER, QUERY, k], vec![ASSIST, v, EOS], &mut rng)?;
    let target = h.hay_start + (depth * (h.hay_len - 3) as Float).round() as usize;
    let at = h
        .tool_turns
        .iter()
        .flat_map(|&(s, e)| s + 1..=e - 3)
        .min_by_key(|&p| p.abs_diff(target))
        .expect("tool turns are wider than a fact");
    let needles = h.plant_fact(at, k, v).to_vec();
    let answer = vec![h.response_start() + 1];
    let (tokens, segmentation, regions) = h.layout.finish(DEFAULT_SINK_WINDOW)?;
    Ok(Sample {
        tokens,
        segmentation,
        answer_span: answer,
        needle_positions: needles,
        kind: TaskKind::SingleFact,
        seed,
        depth: Some(depth),
        fact_pair: (k, v),
        regions,
    })
}

/// Chained facts `k → a`, `a → v` in distinct tool turns plus a distractor.
pub fn gen_two_fact(vocab: &Vocab, t: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = distinct(&mut rng, vocab.n_keys, 3);
    let (k, a, kd) = (vocab.key(keys[0]), vocab.key(keys[1]), vocab.key(keys[2]));
    let vi = rng.random_range(0..vocab.n_values);
    let v = vocab.value(vi);
    let vd = vocab.value(pick_other(&mut rng, vocab.n_values, &[vi]));
    let mut h = haystack(vocab, t, vec![USER, QUERY, k], vec![ASSIST, v, EOS], &mut rng)?;
    let turns = distinct(&mut rng, N_TOOL_TURNS, 3);
    let mut needles = Vec::new();
    for (turn, (head, tail)) in turns.into_iter().zip([(k, a), (a, v), (kd, vd)]) {
        let at = h.random_slot(turn, 3, &mut rng);
        needles.extend(h.plant_fact(at, head, tail));
    }
    needles.sort_unstable();
    let answer = vec![h.response_start() + 1];
    let (tokens, segmentation, regions) = h.layout.finish(DEFAULT_SINK_WINDOW)?;
    Ok(Sample {
        tokens,
        segmentation,
        answer_span: answer,
        needle_positions: needles,
        kind: TaskKind::TwoFact,
        seed,
        depth: None,
        fact_pair: (k, v),
        regions,
    })
}

/// Two values for one key; the answer lists both in context order.
pub fn gen_multi_value(vocab: &Vocab, t: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = distinct(&mut rng, vocab.n_keys, 2);
    let vals = distinct(&mut rng, vocab.n_values, 3);
    let (k, kd) = (vocab.key(keys[0]), vocab.key(keys[1]));
    let v: Vec<usize> = vals.iter().map(|&i| vocab.value(i)).collect();
    let turns = {
        let mut t = distinct(&mut rng, N_TOOL_TURNS, 3);
        t[..2].sort_unstable();
        t
    };
    let mut h = haystack(
        vocab,
        t,
        vec![USER, QUERY, k],
        vec![ASSIST, v[0], v[1], EOS],
        &mut rng,
    )?;
    let mut needles = Vec::new();
    for (turn, (head, tail)) in turns.into_iter().zip([(k, v[0]), (k, v[1]), (kd, v[2])]) {
        let at = h.random_slot(turn, 3, &mut rng);
        needles.extend(h.plant_fact(at, head, tail));
    }
    needles.sort_unstable();
    let rs = h.response_start();
    let (tokens, segmentation, regions) = h.layout.finish(DEFAULT_SINK_WINDOW)?;
    Ok(Sample {
        tokens,
        segmentation,
        answer_span: vec![rs + 1, rs + 2],
        needle_positions: needles,
        kind: TaskKind::MultiValue,
        seed,
        depth: None,
        fact_pair: (k, v[0]),
        regions,
    })
}

/// Repeated key symbols scattered in tool turns; the answer is the most
/// frequent one.
pub fn gen_aggregation(vocab: &Vocab, t: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = distinct(&mut rng, vocab.n_keys, 4);
    let top_count = rng.random_range(4..=6);
    let mut counts = vec![(vocab.key(keys[0]), top_count)];
    for &k in &keys[1..] {
        counts.push((vocab.key(k), rng.random_range(1..top_count)));
    }
    let top = counts[0].0;
    let runner_up = counts[1].0;
    let mut h = haystack(vocab, t, vec![USER, QUERY], vec![ASSIST, top, EOS], &mut rng)?;
    let mut slots: Vec<usize> = h.tool_turns.iter().flat_map(|&(s, e)| s + 1..e).collect();
    slots.shuffle(&mut rng);
    let mut needles = Vec::new();
    let mut it = slots.into_iter();
    for (k, c) in counts {
        for _ in 0..c {
            let p = it.next().expect("haystack holds every planted key");
            h.layout.tokens[p] = k;
            needles.push(p);
        }
    }
    needles.sort_unstable();
    let rs = h.response_start();
    let (tokens, segmentation, regions) = h.layout.finish(DEFAULT_SINK_WINDOW)?;
    Ok(Sample {
        tokens,
        segmentation,
        answer_span: vec![rs + 1],
        needle_positions: needles,
        kind: TaskKind::Aggregation,
        seed,
        depth: None,
        fact_pair: (runner_up, top),
        regions,
    })
}

/// Alternating turns: a system/user turn and a tool-call response, then
/// `n_turns - 1` tool turns each planting a fact and querying a fact from
/// the current or an earlier tool turn, each followed by the answer.
pub fn gen_multiturn_agentic(vocab: &Vocab, t: usize, n_turns: usize, seed: u64) -> Result<Sample> {
    if n_turns < 2 {
        return Err(Error::Config(format!("n_turns must be at least 2, got {n_turns}")));
    }
    let n_tools = n_turns - 1;
    if n_tools > vocab.n_keys {
        return Err(Error::Config(format!(
            "{n_tools} tool turns need distinct keys but the vocab has {}",
            vocab.n_keys
        )));
    }
    // System turn: BOS SYS USER + filler; tool turn: TOOL fact(3) QUERY key.
    let fixed = 3 + n_turns * 3 + n_tools * 6;
    let min_fill = (DEFAULT_SINK_WINDOW + 1) + n_tools;
    if t < fixed + min_fill {
        return Err(Error::Config(format!(
            "sequence length {t} too small for {n_turns} agentic turns (need {})",
            fixed + min_fill
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<usize> = distinct(&mut rng, vocab.n_keys, n_tools)
        .into_iter()
        .map(|i| vocab.key(i))
        .collect();
    let vals: Vec<usize> = (0..n_tools)
        .map(|_| vocab.value(rng.random_range(0..vocab.n_values)))
        .collect();
    let fills = split_even(t - fixed, n_turns);

    let mut layout = Layout::new();
    let mut sys = vec![BOS, SYS];
    let half = fills[0] / 2;
    sys.extend(filler(vocab, half, &mut rng));
    sys.push(USER);
    sys.extend(filler(vocab, fills[0] - half, &mut rng));
    layout.push(Label::Context, RegionTag::SystemUser, sys);
    layout.push(Label::Response, RegionTag::AssistantResponse, vec![ASSIST, QUERY, EOS]);

    let mut needles = Vec::new();
    let mut fact_pair = (0, 0);
    let mut answer = 0;
    for s in 0..n_tools {
        let fill = fills[s + 1];
        let at = rng.random_range(0..=fill);
        let mut toks = vec![TOOL];
        toks.extend(filler(vocab, at, &mut rng));
        toks.extend([SEP, keys[s], vals[s]]);
        toks.extend(filler(vocab, fill - at, &mut rng));
        let asked = rng.random_range(0..=s);
        toks.extend([QUERY, keys[asked]]);
        let start = layout.push(Label::Context, RegionTag::ToolResponse, toks);
        needles.extend([start + 1 + at, start + 2 + at, start + 3 + at]);
        let r = layout.push(
            Label::Response,
            RegionTag::AssistantResponse,
            vec![ASSIST, vals[asked], EOS],
        );
        fact_pair = (keys[asked], vals[asked]);
        answer = r + 1;
    }
    let (tokens, segmentation, regions) = layout.finish(DEFAULT_SINK_WINDOW)?;
    Ok(Sample {
        tokens,
        segmentation,
        answer_span: vec![answer],
        needle_positions: needles,
        kind: TaskKind::Agentic,
        seed,
        depth: None,
        fact_pair,
        regions,
    })
}

/// Everything needed to generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Fixed needle depth for single-fact tasks; drawn per sample when `None`.
    pub depth: Option<Float>,
    pub n_turns: usize,
    pub vocab_size: usize,
    pub eval_fraction: Float,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::SingleFact,
            seq_len: 256,
            depth: None,
            n_turns: 5,
            vocab_size: 64,
            eval_fraction: 0.2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab_size)?;
        if let Some(d) = self.depth {
            check_depth(d)?;
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!(
                "task.eval_fraction {} outside [0, 1)",
                self.eval_fraction
            )));
        }
        // Generating one sample surfaces template-size errors early.
        generate(self, 0).map(|_| ())
    }
}

/// One sample of the configured kind; a pure function of `(cfg, seed)`.
pub fn generate(cfg: &TaskConfig, seed: u64) -> Result<Sample> {
    let vocab = Vocab::new(cfg.vocab_size)?;
    match cfg.kind {
        TaskKind::SingleFact => {
            let depth = match cfg.depth {
                Some(d) => d,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xDE97));
                    rng.random_range(0.0..=1.0)
                }
            };
            gen_single_fact(&vocab, cfg.seq_len, depth, seed)
        }
        TaskKind::TwoFact => gen_two_fact(&vocab, cfg.seq_len, seed),
        TaskKind::MultiValue => gen_multi_value(&vocab, cfg.seq_len, seed),
        TaskKind::Aggregation => gen_aggregation(&vocab, cfg.seq_len, seed),
        TaskKind::Agentic => gen_multiturn_agentic(&vocab, cfg.seq_len, cfg.n_turns, seed),
    }
}

/// Stratified assignment of (head, answer) pairs to the eval split: for each
/// answer symbol a fixed share of heads is held out.
#[derive(Debug, Clone)]
pub struct PairSplit {
    eval: HashSet<(usize, usize)>,
}

impl PairSplit {
    pub fn new(vocab: &Vocab, kind: TaskKind, fraction: Float, seed: u64) -> Self {
        let (heads, answers): (Vec<usize>, Vec<usize>) = match kind {
            TaskKind::Aggregation => (
                (0..vocab.n_keys).map(|i| vocab.key(i)).collect(),
                (0..vocab.n_keys).map(|i| vocab.key(i)).collect(),
            ),
            _ => (
                (0..vocab.n_keys).map(|i| vocab.key(i)).collect(),
                (0..vocab.n_values).map(|i| vocab.value(i)).collect(),
            ),
        };
        let mut eval = HashSet::new();
        for &a in &answers {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, a as u64));
            let mut hs: Vec<usize> = heads.iter().copied().filter(|&h| h != a).collect();
            hs.shuffle(&mut rng);
            let n = ((hs.len() as Float) * fraction).ceil() as usize;
            eval.extend(hs[..n].iter().map(|&h| (h, a)));
        }
        Self { eval }
    }

    pub fn is_eval(&self, pair: (usize, usize)) -> bool {
        self.eval.contains(&pair)
    }
}

/// Train and eval sets whose fact pairs never overlap.
pub fn make_splits(
    cfg: &TaskConfig,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.vocab_size)?;
    let split = PairSplit::new(&vocab, cfg.kind, cfg.eval_fraction, seed);
    let mut train = Vec::with_capacity(n_train);
    let mut eval = Vec::with_capacity(n_eval);
    let mut counter = 0u64;
    let budget = 1000 * (n_train + n_eval) as u64 + 1000;
    while train.len() < n_train || eval.len() < n_eval {
        if counter > budget {
            return Err(Error::Config(
                "could not fill both splits; the pair pools are too small".into(),
            ));
        }
        let s = generate(cfg, derive_seed(seed, counter))?;
        counter += 1;
        if split.is_eval(s.fact_pair) {
            if eval.len() < n_eval {
                eval.push(s);
            }
        } else if train.len() < n_train {
            train.push(s);
        }
    }
    Ok((train, eval))
}

/// Answer derived from the token sequence alone: resolve the last context
/// `QUERY` through `SEP head tail` facts, or count key symbols when the
/// query names no key.
pub fn oracle_answer(tokens: &[usize], seg: &Segmentation, vocab: &Vocab) -> Option<Vec<usize>> {
    // Context preceding the final response turn.
    let last_resp_turn = (0..seg.len()).rev().find(|&i| !seg.is_context(i))?;
    let final_turn = seg.turn_ids()[last_resp_turn];
    let ctx: Vec<usize> = (0..seg.len())
        .filter(|&i| seg.is_context(i) && seg.turn_ids()[i] < final_turn)
        .collect();
    let q = *ctx.iter().rev().find(|&&i| tokens[i] == QUERY)?;
    let target = ctx
        .iter()
        .find(|&&i| i == q + 1)
        .map(|&i| tokens[i])
        .filter(|&t| vocab.is_key(t));

    let Some(mut key) = target else {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &ctx {
            if vocab.is_key(tokens[i]) {
                *counts.entry(tokens[i]).or_default() += 1;
            }
        }
        let max = *counts.values().max()?;
        let winners: Vec<usize> = counts.iter().filter(|e| *e.1 == max).map(|e| *e.0).collect();
        return (winners.len() == 1).then(|| winners);
    };

    let mut facts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for w in ctx.windows(3) {
        if w[1] == w[0] + 1 && w[2] == w[1] + 1 && tokens[w[0]] == SEP {
            facts.entry(tokens[w[1]]).or_default().push(tokens[w[2]]);
        }
    }
    for _ in 0..vocab.n_keys {
        let tails = facts.get(&key)?;
        if tails.iter().all(|&t| vocab.is_value(t)) {
            return Some(tails.clone());
        }
        match tails.as_slice() {
            [next] if vocab.is_key(*next) => key = *next,
            _ => return None,
        }
    }
    None
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(s);
    }
    Ok(out)
}
