//! Inner/outer training with ephemeral fast weights.
//!
//! Each step draws fresh adapters φ⁰ (zero delta), takes `k` clipped SGD
//! steps on them with θ frozen, then updates θ with AdamW on the same
//! response loss evaluated at the adapted φ, which enters the outer graph as
//! constants. φ is dropped at the end of the step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diagnostics::{summarize, AttentionSummary, QuerySet, DEFAULT_SINK_WINDOW};
use crate::error::{Error, Result};
use crate::fastweights::{derive_seed, init_adapters, AdapterConfig, AdapterSet, BoundAdapters};
use crate::masking::{build_causal_mask, build_focusft_mask, Segmentation};
use crate::model::{
    embed, forward, head, response_cross_entropy, rope_table, run_layers, AttentionTrace,
    BoundModel, ModelWeights,
};
use crate::optim::{clip_grad_norm, OptimizerState, WarmupCosine};
use crate::taskgen::{Sample, TaskKind};
use crate::tensor::{Float, Tensor};
use crate::timing::Stopwatch;

/// The four training configurations: bilevel on/off × mask kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    StandardSFT,
    SFTBidir,
    CausalBilevel,
    FocuSFT,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::StandardSFT, Mode::SFTBidir, Mode::CausalBilevel, Mode::FocuSFT];

    pub fn bilevel(self) -> bool {
        matches!(self, Mode::CausalBilevel | Mode::FocuSFT)
    }

    pub fn bidirectional(self) -> bool {
        matches!(self, Mode::SFTBidir | Mode::FocuSFT)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::StandardSFT => "standard_sft",
            Mode::SFTBidir => "sft_bidir",
            Mode::CausalBilevel => "causal_bilevel",
            Mode::FocuSFT => "focusft",
        }
    }

    /// Human-readable row label.
    pub fn label(self) -> &'static str {
        match self {
            Mode::StandardSFT => "StandardSFT",
            Mode::SFTBidir => "SFT+Bidir",
            Mode::CausalBilevel => "CausalBilevel",
            Mode::FocuSFT => "FocuSFT",
        }
    }

    /// Training mask for a segmentation under this mode.
    pub fn mask(self, seg: &Segmentation) -> Result<Tensor> {
        if self.bidirectional() {
            Ok(build_focusft_mask(seg))
        } else {
            build_causal_mask(seg.len())
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "standardsft" | "sft" => Ok(Mode::StandardSFT),
            "sftbidir" => Ok(Mode::SFTBidir),
            "causalbilevel" => Ok(Mode::CausalBilevel),
            "focusft" => Ok(Mode::FocuSFT),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}; expected one of standard_sft, sft_bidir, causal_bilevel, focusft"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    WarmupCosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" | "warmup_cosine" => Ok(Schedule::WarmupCosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}; expected constant or cosine"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::WarmupCosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: Mode,
    /// Inner steps per outer step.
    pub k: usize,
    pub eta_in: Float,
    pub inner_clip: Float,
    pub lr: Float,
    pub schedule: Schedule,
    pub warmup_fraction: Float,
    pub weight_decay: Float,
    pub betas: (Float, Float),
    pub outer_clip: Float,
    pub epochs: usize,
    /// Micro-batches of one sample accumulated per outer update.
    pub batch_size: usize,
    pub seed: u64,
    /// Record an attention summary every this many steps (0 disables).
    pub trace_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FocuSFT,
            k: 2,
            eta_in: 1e-2,
            inner_clip: 1.0,
            lr: 2e-3,
            schedule: Schedule::WarmupCosine,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            betas: (0.9, 0.95),
            outer_clip: 1.0,
            epochs: 5,
            batch_size: 1,
            seed: 1234,
            trace_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("trainer.{field}: {msg}")));
        if !(self.eta_in >= 0.0 && self.eta_in.is_finite()) {
            return bad("eta_in", format!("must be finite and non-negative, got {}", self.eta_in));
        }
        if !(self.inner_clip > 0.0) {
            return bad("inner_clip", format!("must be positive, got {}", self.inner_clip));
        }
        if !(self.outer_clip > 0.0) {
            return bad("outer_clip", format!("must be positive, got {}", self.outer_clip));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", format!("must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, format!("must lie in [0, 1), got {b}"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::adamw(self.lr, self.betas, self.weight_decay)
    }
}

/// One outer step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based global step.
    pub step: usize,
    pub epoch: usize,
    pub mode: Mode,
    /// `L_inner(φ⁰) .. L_inner(φᴷ)` averaged over micro-batches; empty when
    /// the mode has no inner loop.
    pub inner_losses: Vec<Float>,
    pub outer_loss: Float,
    /// Pre-clip inner gradient norm per inner step.
    pub grad_norm_inner: Vec<Float>,
    /// Pre-clip outer gradient norm.
    pub grad_norm_outer: Float,
    pub lr: Float,
    pub t_inner_ms: f64,
    pub t_outer_ms: f64,
    pub t_total_ms: f64,
    pub attention: Option<AttentionSummary>,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: usize,
    mode: &'a str,
    inner_losses: &'a [Float],
    outer_loss: Float,
    grad_norm_inner: &'a [Float],
    grad_norm_outer: Float,
    t_inner_ms: Option<f64>,
    t_outer_ms: Option<f64>,
    lr: Float,
}

impl StepReport {
    /// One metrics JSONL line. Timings are `null` unless requested so that
    /// reruns produce identical bytes.
    pub fn metrics_line(&self, with_timing: bool) -> Result<String> {
        Ok(serde_json::to_string(&MetricsLine {
            step: self.step,
            mode: self.mode.name(),
            inner_losses: &self.inner_losses,
            outer_loss: self.outer_loss,
            grad_norm_inner: &self.grad_norm_inner,
            grad_norm_outer: self.grad_norm_outer,
            t_inner_ms: with_timing.then_some(self.t_inner_ms),
            t_outer_ms: with_timing.then_some(self.t_outer_ms),
            lr: self.lr,
        })?)
    }

    pub fn timing_line(&self) -> String {
        format!(
            "{{\"step\":{},\"t_inner_ms\":{:.4},\"t_outer_ms\":{:.4},\"t_total_ms\":{:.4}}}",
            self.step, self.t_inner_ms, self.t_outer_ms, self.t_total_ms
        )
    }
}

fn ensure_finite(v: Float, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

fn ensure_grads_finite(grads: &[Tensor], what: &str) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite entries")))
    }
}

/// Hidden state entering the first adapted layer, computed once without a
/// tape. Layers below it see no adapters, so this is fixed for the step.
pub fn prefix_hidden(
    theta: &ModelWeights,
    tokens: &[usize],
    mask: &Tensor,
    first_layer: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = theta.bind(&mut g, false)?;
    let x = embed(&mut g, &m, tokens)?;
    let rope = rope_table(&theta.config, tokens.len())?;
    let x = run_layers(&mut g, &m, x, 0..first_layer, mask, rope.as_ref(), None, None)?;
    Ok(g.value(x).clone())
}

/// Inner loss at `phi` from a cached prefix; returns the graph so callers
/// can differentiate with respect to the adapter leaves.
fn inner_graph(
    theta: &ModelWeights,
    phi: &AdapterSet,
    prefix: &Tensor,
    first_layer: usize,
    tokens: &[usize],
    response: &[usize],
    mask: &Tensor,
) -> Result<(Graph, BoundAdapters, Var)> {
    let mut g = Graph::new();
    let m = theta.bind(&mut g, false)?;
    let a = phi.bind(&mut g, true)?;
    let x = g.constant(prefix.clone())?;
    let rope = rope_table(&theta.config, tokens.len())?;
    let n = theta.config.n_layers;
    let x = run_layers(&mut g, &m, x, first_layer..n, mask, rope.as_ref(), Some(&a), None)?;
    let logits = head(&mut g, &m, x)?;
    let loss = response_cross_entropy(&mut g, logits, tokens, response)?;
    Ok((g, a, loss))
}

#[derive(Debug, Clone)]
pub struct InnerResult {
    pub adapters: AdapterSet,
    /// Losses at `φ⁰ .. φᴷ` (length `k + 1`), or `φ⁰ .. φᴷ⁻¹` from
    /// [`inner_steps`].
    pub losses: Vec<Float>,
    /// Pre-clip gradient norm of each inner step (length `k`).
    pub grad_norms: Vec<Float>,
}

/// `k` clipped SGD steps on φ with θ held fixed. The loss at the final φ is
/// not computed; it equals the outer loss of the same step.
pub fn inner_steps(
    theta: &ModelWeights,
    mut phi: AdapterSet,
    tokens: &[usize],
    response: &[usize],
    mask: &Tensor,
    k: usize,
    eta_in: Float,
    clip: Float,
) -> Result<InnerResult> {
    let mut losses = Vec::with_capacity(k + 1);
    let mut grad_norms = Vec::with_capacity(k);
    if k == 0 {
        return Ok(InnerResult {
            adapters: phi,
            losses,
            grad_norms,
        });
    }
    let first = phi
        .first_layer()
        .ok_or_else(|| Error::Config("adapter set is empty".into()))?;
    let prefix = prefix_hidden(theta, tokens, mask, first)?;
    let mut sgd = OptimizerState::sgd(eta_in);
    for step in 0..k {
        let (mut g, a, loss) = inner_graph(theta, &phi, &prefix, first, tokens, response, mask)?;
        let value = g.value(loss).item();
        ensure_finite(value, &format!("inner loss at inner step {step}"))?;
        losses.push(value);
        g.backward(loss)?;
        let mut grads = a.grads(&g);
        ensure_grads_finite(&grads, &format!("inner gradient at inner step {step}"))?;
        grad_norms.push(clip_grad_norm(&mut grads, clip));
        sgd.apply(&mut phi.params_mut(), &grads)?;
    }
    Ok(InnerResult {
        adapters: phi,
        losses,
        grad_norms,
    })
}

/// Full inner trajectory `L(φ⁰) .. L(φᴷ)` including the final evaluation.
pub fn inner_loop(
    theta: &ModelWeights,
    phi: AdapterSet,
    tokens: &[usize],
    response: &[usize],
    mask: &Tensor,
    k: usize,
    eta_in: Float,
    clip: Float,
) -> Result<InnerResult> {
    let mut r = inner_steps(theta, phi, tokens, response, mask, k, eta_in, clip)?;
    let mut g = Graph::new();
    let m = theta.bind(&mut g, false)?;
    let a = r.adapters.bind(&mut g, false)?;
    let logits = forward(&mut g, &m, tokens, mask, Some(&a), None)?;
    let loss = response_cross_entropy(&mut g, logits, tokens, response)?;
    let value = g.value(loss).item();
    ensure_finite(value, "inner loss at the adapted fast weights")?;
    r.losses.push(value);
    Ok(r)
}

/// Outer graph: θ trainable, φ recorded as constants.
pub struct OuterGraph {
    pub graph: Graph,
    pub model: BoundModel,
    pub adapters: Option<BoundAdapters>,
    pub loss: Var,
}

pub fn build_outer_graph(
    theta: &ModelWeights,
    phi: Option<&AdapterSet>,
    tokens: &[usize],
    response: &[usize],
    mask: &Tensor,
) -> Result<OuterGraph> {
    let mut graph = Graph::new();
    let model = theta.bind(&mut graph, true)?;
    let adapters = phi.map(|p| p.bind(&mut graph, false)).transpose()?;
    let logits = forward(&mut graph, &model, tokens, mask, adapters.as_ref(), None)?;
    let loss = response_cross_entropy(&mut graph, logits, tokens, response)?;
    Ok(OuterGraph {
        graph,
        model,
        adapters,
        loss,
    })
}

/// Outer loss and `∇_θ` with φ fixed.
pub fn outer_gradients(
    theta: &ModelWeights,
    phi: Option<&AdapterSet>,
    tokens: &[usize],
    response: &[usize],
    mask: &Tensor,
) -> Result<(Float, Vec<Tensor>)> {
    let mut og = build_outer_graph(theta, phi, tokens, response, mask)?;
    let value = og.graph.value(og.loss).item();
    ensure_finite(value, "outer loss")?;
    og.graph.backward(og.loss)?;
    let grads = og.model.grads(&og.graph);
    ensure_grads_finite(&grads, "outer gradient")?;
    Ok((value, grads))
}

/// Clip `grads` and apply one optimizer update to θ. Returns the pre-clip norm.
pub fn outer_apply(
    theta: &mut ModelWeights,
    mut grads: Vec<Tensor>,
    opt: &mut OptimizerState,
    clip: Float,
) -> Result<Float> {
    let norm = clip_grad_norm(&mut grads, clip);
    opt.apply(&mut theta.params_mut(), &grads)?;
    Ok(norm)
}

/// One outer step on a single sample: gradient, clip, update.
pub fn outer_step(
    theta: &mut ModelWeights,
    phi: Option<&AdapterSet>,
    tokens: &[usize],
    response: &[usize],
    mask: &Tensor,
    opt: &mut OptimizerState,
    clip: Float,
) -> Result<(Float, Float)> {
    let (loss, grads) = outer_gradients(theta, phi, tokens, response, mask)?;
    let norm = outer_apply(theta, grads, opt, clip)?;
    Ok((loss, norm))
}

/// Everything `train` needs besides θ and the data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub trainer: TrainerConfig,
    pub adapters: AdapterConfig,
}

fn step_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x5EED_DA7A, epoch as u64));
    idx.shuffle(&mut rng);
    idx
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    n_samples.div_ceil(batch_size)
}

/// Runs `epochs × steps_per_epoch` outer steps, calling `observe` after each
/// with the report and current θ. On an aborted step θ keeps its last
/// good value and the error is returned.
pub fn train(
    theta: &mut ModelWeights,
    dataset: &[Sample],
    setup: &TrainSetup,
    mut observe: impl FnMut(&StepReport, &ModelWeights) -> Result<()>,
) -> Result<Vec<StepReport>> {
    let cfg = &setup.trainer;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Task("training dataset is empty".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.segmentation.len() != s.tokens.len() {
            return Err(Error::Task(format!("sample {i} has a mismatched segmentation")));
        }
    }
    if cfg.mode.bilevel() {
        setup.adapters.validate(&theta.config)?;
    }
    let per_epoch = steps_per_epoch(dataset.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let schedule = WarmupCosine::new(cfg.lr, total, cfg.warmup_fraction);
    let mut opt = cfg.optimizer();
    let mut reports = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = step_order(dataset.len(), cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.lr,
                Schedule::WarmupCosine => schedule.lr_at(step),
            };
            opt.lr = lr;
            let report = train_step(theta, dataset, batch, setup, &mut opt, step, epoch, lr)
                .map_err(|e| annotate(e, step))?;
            observe(&report, theta)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

fn annotate(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {step} aborted: {msg}")),
        other => other,
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    theta: &mut ModelWeights,
    dataset: &[Sample],
    batch: &[usize],
    setup: &TrainSetup,
    opt: &mut OptimizerState,
    step: usize,
    epoch: usize,
    lr: Float,
) -> Result<StepReport> {
    let cfg = &setup.trainer;
    let total_watch = Stopwatch::start();
    let bilevel = cfg.mode.bilevel();
    let phi0 = if bilevel {
        let seed = derive_seed(cfg.seed, step as u64);
        Some(init_adapters(
            &AdapterConfig {
                seed,
                ..setup.adapters.clone()
            },
            &theta.config,
        )?)
    } else {
        None
    };

    let mut t_inner = 0.0;
    let mut t_outer = 0.0;
    let mut inner_sum = vec![0.0; if bilevel { cfg.k + 1 } else { 0 }];
    let mut norm_sum = vec![0.0; if bilevel { cfg.k } else { 0 }];
    let mut outer_sum = 0.0;
    let mut grad_sum: Option<Vec<Tensor>> = None;
    for &i in batch {
        let sample = &dataset[i];
        let response = sample.segmentation.response_positions();
        let mask = cfg.mode.mask(&sample.segmentation)?;
        let watch = Stopwatch::start();
        let phi = match &phi0 {
            Some(p) => {
                let r = inner_steps(
                    theta,
                    p.clone(),
                    &sample.tokens,
                    &response,
                    &mask,
                    cfg.k,
                    cfg.eta_in,
                    cfg.inner_clip,
                )?;
                for (s, l) in inner_sum.iter_mut().zip(&r.losses) {
                    *s += l;
                }
                for (s, n) in norm_sum.iter_mut().zip(&r.grad_norms) {
                    *s += n;
                }
                Some(r.adapters)
            }
            None => None,
        };
        t_inner += watch.elapsed_ms();

        let watch = Stopwatch::start();
        let (loss, grads) = outer_gradients(theta, phi.as_ref(), &sample.tokens, &response, &mask)?;
        if bilevel {
            // L_inner(φᴷ) is the outer loss under the shared objective.
            inner_sum[cfg.k] += loss;
        }
        outer_sum += loss;
        match &mut grad_sum {
            None => grad_sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
        t_outer += watch.elapsed_ms();
    }

    let watch = Stopwatch::start();
    let n = batch.len() as Float;
    let mut grads = grad_sum.expect("batch is non-empty");
    if batch.len() > 1 {
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
        }
    }
    let grad_norm_outer = outer_apply(theta, grads, opt, cfg.outer_clip)?;
    t_outer += watch.elapsed_ms();

    let attention = if cfg.trace_every > 0 && step % cfg.trace_every == 0 {
        let s = &dataset[batch[0]];
        Some(trace_summary(theta, s, cfg.mode.mask(&s.segmentation)?)?)
    } else {
        None
    };

    Ok(StepReport {
        step,
        epoch,
        mode: cfg.mode,
        inner_losses: inner_sum.into_iter().map(|s| s / n).collect(),
        outer_loss: outer_sum / n,
        grad_norm_inner: norm_sum.into_iter().map(|s| s / n).collect(),
        grad_norm_outer,
        lr,
        t_inner_ms: t_inner,
        t_outer_ms: t_outer,
        t_total_ms: total_watch.elapsed_ms(),
        attention,
    })
}

/// Attention summary of one traced forward of θ under `mask`.
pub fn trace_summary(theta: &ModelWeights, sample: &Sample, mask: Tensor) -> Result<AttentionSummary> {
    let mut trace = AttentionTrace::new(theta.config.n_layers);
    theta.logits(&sample.tokens, &mask, None, Some(&mut trace))?;
    summarize(
        &trace,
        &sample.segmentation,
        &sample.regions,
        DEFAULT_SINK_WINDOW,
        QuerySet::Response,
    )
}

/// Mean response loss over a dataset under a mode's mask, without updating.
pub fn mean_loss(theta: &ModelWeights, samples: &[Sample], mode: Mode) -> Result<Float> {
    let mut total = 0.0;
    for s in samples {
        let mask = mode.mask(&s.segmentation)?;
        let logits = theta.logits(&s.tokens, &mask, None, None)?;
        let mut g = Graph::new();
        let l = g.constant(logits)?;
        let loss = g.cross_entropy(
            l,
            &crate::model::response_targets(&s.tokens, &s.segmentation.response_positions())?,
        )?;
        total += g.value(loss).item();
    }
    Ok(total / samples.len().max(1) as Float)
}

fn argmax(row: &[Float]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy causal decode of the answer span. Positions inside the span are
/// filled with the model's own predictions as decoding proceeds.
pub fn decode_answer(
    theta: &ModelWeights,
    sample: &Sample,
    adapters: Option<&AdapterSet>,
) -> Result<Vec<usize>> {
    let (&first, &last) = match (sample.answer_span.first(), sample.answer_span.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Task("sample has no answer span".into())),
    };
    if first == 0 || last >= sample.tokens.len() {
        return Err(Error::Task("answer span out of range".into()));
    }
    let mut tokens = sample.tokens[..first].to_vec();
    let mut predicted = Vec::with_capacity(sample.answer_span.len());
    for p in first..=last {
        let mask = build_causal_mask(tokens.len())?;
        let logits = theta.logits(&tokens, &mask, adapters, None)?;
        let next = argmax(logits.row(tokens.len() - 1));
        if sample.answer_span.contains(&p) {
            predicted.push(next);
            tokens.push(next);
        } else {
            tokens.push(sample.tokens[p]);
        }
    }
    Ok(predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub kind: TaskKind,
    pub depth: Option<Float>,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Float,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let correct = records.iter().filter(|r| r.correct).count();
        Self {
            accuracy: correct as Float / records.len().max(1) as Float,
            records,
        }
    }
}

/// Exact-match accuracy of greedy causal decoding.
pub fn evaluate(theta: &ModelWeights, samples: &[Sample]) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let predicted = decode_answer(theta, s, None)?;
        let gold = s.gold();
        records.push(EvalRecord {
            index,
            kind: s.kind,
            depth: s.depth,
            correct: predicted == gold,
            gold,
            predicted,
        });
    }
    Ok(EvalReport::from_records(records))
}

/// Start of the final response turn.
fn final_response_start(seg: &Segmentation) -> Option<usize> {
    let last = (0..seg.len()).rev().find(|&i| !seg.is_context(i))?;
    let turn = seg.turn_ids()[last];
    (0..=last).find(|&i| seg.turn_ids()[i] == turn)
}

/// Settings for test-time adaptation.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub adapters: AdapterConfig,
    pub steps: usize,
    pub eta_in: Float,
    pub clip: Float,
    /// Use the bidirectional-context mask for the adaptation step.
    pub bidirectional: bool,
    pub seed: u64,
}

/// Adapts fresh fast weights on the sample's prefix before its final
/// response turn, using earlier response turns as targets. Returns `None`
/// when the prefix has no response positions to learn from.
pub fn inference_adapt(
    theta: &ModelWeights,
    sample: &Sample,
    cfg: &AdaptConfig,
) -> Result<Option<AdapterSet>> {
    let Some(cut) = final_response_start(&sample.segmentation) else {
        return Ok(None);
    };
    let seg = sample.segmentation.truncated(cut)?;
    let targets: Vec<usize> = seg.response_positions().into_iter().filter(|&p| p > 0).collect();
    if targets.is_empty() {
        return Ok(None);
    }
    let tokens = &sample.tokens[..cut];
    let mask = if cfg.bidirectional {
        build_focusft_mask(&seg)
    } else {
        build_causal_mask(cut)?
    };
    let phi0 = init_adapters(
        &AdapterConfig {
            seed: cfg.seed,
            ..cfg.adapters.clone()
        },
        &theta.config,
    )?;
    let r = inner_steps(theta, phi0, tokens, &targets, &mask, cfg.steps, cfg.eta_in, cfg.clip)?;
    Ok(Some(r.adapters))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub base: EvalReport,
    /// Adapted decode over the samples that could be adapted.
    pub adapted: EvalReport,
    /// Base decode over the same adapted subset.
    pub base_on_adapted: EvalReport,
    pub skipped: Vec<usize>,
}

/// Base vs adapted decoding; samples without pseudo-targets are skipped
/// and listed.
pub fn evaluate_adapted(theta: &ModelWeights, samples: &[Sample], cfg: &AdaptConfig) -> Result<AdaptReport> {
    let base = evaluate(theta, samples)?;
    let mut adapted = Vec::new();
    let mut base_sub = Vec::new();
    let mut skipped = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        let per_sample = AdaptConfig {
            seed: derive_seed(cfg.seed, index as u64),
            ..cfg.clone()
        };
        match inference_adapt(theta, s, &per_sample)? {
            None => skipped.push(index),
            Some(phi) => {
                let predicted = decode_answer(theta, s, Some(&phi))?;
                let gold = s.gold();
                adapted.push(EvalRecord {
                    index,
                    kind: s.kind,
                    depth: s.depth,
                    correct: predicted == gold,
                    gold,
                    predicted,
                });
                base_sub.push(base.records[index].clone());
            }
        }
    }
    Ok(AdaptReport {
        base,
        adapted: EvalReport::from_records(adapted),
        base_on_adapted: EvalReport::from_records(base_sub),
        skipped,
    })
}
