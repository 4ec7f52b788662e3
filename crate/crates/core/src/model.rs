//! A small pre-norm decoder transformer with rotary positions and a
//! mask-parameterized attention, plus the response-only cross-entropy.
//!
//! Activations are row-major `T × d`; weight matrices are stored `in × out`
//! so every projection is `x · W`. The output head is tied to the token
//! embedding.

use std::ops::Range;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fastweights::{AdapterSet, BoundAdapters};
use crate::rope::RopeTable;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `down(gelu(up(x)))`
    Plain,
    /// `down(silu(gate(x)) * up(x))`
    Gated,
}

/// The FFN matrices an adapter can hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnMatrix {
    Gate,
    Up,
    Down,
}

impl FfnMatrix {
    pub fn name(self) -> &'static str {
        match self {
            FfnMatrix::Gate => "gate",
            FfnMatrix::Up => "up",
            FfnMatrix::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "gate" | "gate_proj" => Ok(FfnMatrix::Gate),
            "up" | "up_proj" => Ok(FfnMatrix::Up),
            "down" | "down_proj" => Ok(FfnMatrix::Down),
            other => Err(Error::Config(format!("unknown FFN matrix {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: Float,
    /// Rotary embeddings on/off. Off is only for position-free symmetry checks.
    pub rope: bool,
    pub ffn: FfnKind,
    pub norm_eps: Float,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 64,
            max_seq_len: 512,
            rope_base: 10000.0,
            rope: true,
            ffn: FfnKind::Plain,
            norm_eps: 1e-6,
            seed: 1234,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rope && self.d_head() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.d_head()
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("model.rope_base must exceed 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("model.norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// FFN matrices present in this architecture, with `(in, out)` dims.
    pub fn ffn_matrices(&self) -> Vec<(FfnMatrix, usize, usize)> {
        let (d, f) = (self.d_model, self.d_ff);
        match self.ffn {
            FfnKind::Plain => vec![(FfnMatrix::Up, d, f), (FfnMatrix::Down, f, d)],
            FfnKind::Gated => vec![
                (FfnMatrix::Gate, d, f),
                (FfnMatrix::Up, d, f),
                (FfnMatrix::Down, f, d),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_gain: Tensor,
    pub w_gate: Option<Tensor>,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("attn_gain", &self.attn_gain),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_gain", &self.ffn_gain),
        ];
        if let Some(g) = &self.w_gate {
            v.push(("w_gate", g));
        }
        v.push(("w_up", &self.w_up));
        v.push(("w_down", &self.w_down));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.attn_gain,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_gain,
        ];
        if let Some(g) = &mut self.w_gate {
            v.push(g);
        }
        v.push(&mut self.w_up);
        v.push(&mut self.w_down);
        v
    }
}

/// Base parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
}

/// Deterministic initialization from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, f) = (config.d_model, config.d_ff);
    let std = 0.02;
    let resid_std = 0.02 / (2.0 * config.n_layers as Float).sqrt();
    let embed = Tensor::randn(&[config.vocab_size, d], std, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_gain: Tensor::filled(&[d], 1.0),
            wq: Tensor::randn(&[d, d], std, &mut rng),
            wk: Tensor::randn(&[d, d], std, &mut rng),
            wv: Tensor::randn(&[d, d], std, &mut rng),
            wo: Tensor::randn(&[d, d], resid_std, &mut rng),
            ffn_gain: Tensor::filled(&[d], 1.0),
            w_gate: match config.ffn {
                FfnKind::Gated => Some(Tensor::randn(&[d, f], std, &mut rng)),
                FfnKind::Plain => None,
            },
            w_up: Tensor::randn(&[d, f], std, &mut rng),
            w_down: Tensor::randn(&[f, d], resid_std, &mut rng),
        })
        .collect();
    Ok(ModelWeights {
        config: config.clone(),
        embed,
        layers,
        final_gain: Tensor::filled(&[d], 1.0),
    })
}

impl ModelWeights {
    /// Every parameter with a stable dotted name, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out
    }

    /// Mutable parameters in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for layer in self.layers.iter_mut() {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.all_finite())
    }

    /// Record the parameters as leaves on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel> {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        let embed = leaf(&self.embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(BoundLayer {
                attn_gain: leaf(&l.attn_gain)?,
                wq: leaf(&l.wq)?,
                wk: leaf(&l.wk)?,
                wv: leaf(&l.wv)?,
                wo: leaf(&l.wo)?,
                ffn_gain: leaf(&l.ffn_gain)?,
                w_gate: l.w_gate.as_ref().map(&mut leaf).transpose()?,
                w_up: leaf(&l.w_up)?,
                w_down: leaf(&l.w_down)?,
            });
        }
        let final_gain = leaf(&self.final_gain)?;
        Ok(BoundModel {
            config: self.config.clone(),
            embed,
            layers,
            final_gain,
        })
    }

    /// Untracked forward returning logits `T × V`.
    pub fn logits(
        &self,
        tokens: &[usize],
        mask: &Tensor,
        adapters: Option<&AdapterSet>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let bound_adapters = adapters.map(|a| a.bind(&mut g, false)).transpose()?;
        let out = forward(&mut g, &bound, tokens, mask, bound_adapters.as_ref(), trace)?;
        Ok(g.value(out).clone())
    }
}

pub struct BoundLayer {
    pub attn_gain: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_gain: Var,
    pub w_gate: Option<Var>,
    pub w_up: Var,
    pub w_down: Var,
}

/// Model parameters recorded on one graph.
pub struct BoundModel {
    pub config: ModelConfig,
    pub embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_gain: Var,
}

impl BoundModel {
    /// Leaf handles in canonical parameter order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn_gain, l.wq, l.wk, l.wv, l.wo, l.ffn_gain]);
            if let Some(gate) = l.w_gate {
                out.push(gate);
            }
            out.extend([l.w_up, l.w_down]);
        }
        out.push(self.final_gain);
        out
    }

    /// Gradients for every parameter (zeros where none flowed).
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars()
            .into_iter()
            .map(|v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect()
    }
}

/// Post-softmax attention weights per layer and head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub enabled: bool,
    /// `layers[l][h]` is a `T × T` matrix (query × key).
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionTrace {
    pub fn new(n_layers: usize) -> Self {
        Self {
            enabled: true,
            layers: vec![Vec::new(); n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.first())
            .map(Tensor::rows)
            .next()
            .unwrap_or(0)
    }

    /// Head-averaged `T × T` matrix of one layer.
    pub fn head_mean(&self, layer: usize) -> Result<Tensor> {
        let heads = self
            .layers
            .get(layer)
            .filter(|h| !h.is_empty())
            .ok_or_else(|| Error::Usage(format!("no trace recorded for layer {layer}")))?;
        let mut out = Tensor::zeros(heads[0].shape());
        for h in heads {
            out.data_mut()
                .iter_mut()
                .zip(h.data())
                .for_each(|(o, v)| *o += v);
        }
        let n = heads.len() as Float;
        out.data_mut().iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }
}

/// Rotary table for positions `0..t`.
pub fn rope_table(config: &ModelConfig, t: usize) -> Result<Option<Rc<RopeTable>>> {
    if !config.rope {
        return Ok(None);
    }
    let positions: Vec<usize> = (0..t).collect();
    Ok(Some(Rc::new(RopeTable::new(
        &positions,
        config.d_head(),
        config.rope_base,
    )?)))
}

pub fn embed(g: &mut Graph, model: &BoundModel, tokens: &[usize]) -> Result<Var> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence of {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    g.gather_rows(model.embed, tokens)
}

/// Multi-head attention sub-block (without the residual add).
pub fn attention(
    g: &mut Graph,
    model: &BoundModel,
    layer: usize,
    h: Var,
    mask: &Tensor,
    rope: Option<&Rc<RopeTable>>,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let cfg = &model.config;
    let lw = &model.layers[layer];
    let (n_heads, dh) = (cfg.n_heads, cfg.d_head());
    let mut q = g.matmul(h, lw.wq)?;
    let mut k = g.matmul(h, lw.wk)?;
    let v = g.matmul(h, lw.wv)?;
    if let Some(table) = rope {
        q = g.rope(q, Rc::clone(table), n_heads)?;
        k = g.rope(k, Rc::clone(table), n_heads)?;
    }
    let scale = 1.0 / (dh as Float).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut captured = Vec::new();
    let tracing = trace.as_ref().is_some_and(|t| t.enabled);
    for head in 0..n_heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let z = g.matmul_ext(qh, kh, true, scale)?;
        let alpha = g.softmax_masked(z, mask)?;
        if tracing {
            captured.push(g.value(alpha).clone());
        }
        heads.push(g.matmul(alpha, vh)?);
    }
    if let Some(t) = trace.filter(|t| t.enabled) {
        if t.layers.len() <= layer {
            t.layers.resize(layer + 1, Vec::new());
        }
        t.layers[layer] = captured;
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(o, lw.wo)
}

/// `x · W` plus the adapter delta when a hook is registered.
fn hooked_linear(
    g: &mut Graph,
    x: Var,
    w: Var,
    adapters: Option<&BoundAdapters>,
    layer: usize,
    matrix: FfnMatrix,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    match adapters.and_then(|a| a.hook(layer, matrix)) {
        Some(hook) => {
            let delta = hook.delta(g, x)?;
            g.add(base, delta)
        }
        None => Ok(base),
    }
}

fn ffn(
    g: &mut Graph,
    model: &BoundModel,
    layer: usize,
    h: Var,
    adapters: Option<&BoundAdapters>,
) -> Result<Var> {
    let lw = &model.layers[layer];
    let hidden = match (model.config.ffn, lw.w_gate) {
        (FfnKind::Gated, Some(w_gate)) => {
            let gate = hooked_linear(g, h, w_gate, adapters, layer, FfnMatrix::Gate)?;
            let up = hooked_linear(g, h, lw.w_up, adapters, layer, FfnMatrix::Up)?;
            let act = g.silu(gate)?;
            g.mul(act, up)?
        }
        (FfnKind::Gated, None) => {
            return Err(Error::Config("gated FFN without a gate matrix".into()))
        }
        (FfnKind::Plain, _) => {
            let up = hooked_linear(g, h, lw.w_up, adapters, layer, FfnMatrix::Up)?;
            g.gelu(up)?
        }
    };
    hooked_linear(g, hidden, lw.w_down, adapters, layer, FfnMatrix::Down)
}

/// Residual blocks `layers` applied to hidden state `x`.
#[allow(clippy::too_many_arguments)]
pub fn run_layers(
    g: &mut Graph,
    model: &BoundModel,
    mut x: Var,
    layers: Range<usize>,
    mask: &Tensor,
    rope: Option<&Rc<RopeTable>>,
    adapters: Option<&BoundAdapters>,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let eps = model.config.norm_eps;
    for l in layers {
        let lw = &model.layers[l];
        let n1 = g.rms_norm(x, eps)?;
        let h1 = g.mul_row(n1, lw.attn_gain)?;
        let a = attention(g, model, l, h1, mask, rope, trace.as_deref_mut())?;
        x = g.add(x, a)?;
        let n2 = g.rms_norm(x, eps)?;
        let h2 = g.mul_row(n2, lw.ffn_gain)?;
        let f = ffn(g, model, l, h2, adapters)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// Final norm and tied output head.
pub fn head(g: &mut Graph, model: &BoundModel, x: Var) -> Result<Var> {
    let n = g.rms_norm(x, model.config.norm_eps)?;
    let h = g.mul_row(n, model.final_gain)?;
    g.matmul_nt(h, model.embed)
}

/// Full forward pass to logits `T × V`.
pub fn forward(
    g: &mut Graph,
    model: &BoundModel,
    tokens: &[usize],
    mask: &Tensor,
    adapters: Option<&BoundAdapters>,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let t = tokens.len();
    if mask.shape() != [t, t] {
        return Err(Error::Dimension(format!(
            "mask {:?} for {t} tokens",
            mask.shape()
        )));
    }
    let x = embed(g, model, tokens)?;
    let rope = rope_table(&model.config, t)?;
    let n = model.layers.len();
    let x = run_layers(g, model, x, 0..n, mask, rope.as_ref(), adapters, trace)?;
    head(g, model, x)
}

/// `(logit row, target token)` pairs: position `i` is predicted from row `i-1`.
pub fn response_targets(tokens: &[usize], response: &[usize]) -> Result<Vec<(usize, usize)>> {
    if response.is_empty() {
        return Err(Error::Task("no response positions".into()));
    }
    response
        .iter()
        .map(|&i| {
            if i == 0 {
                Err(Error::Task("position 0 has no prefix to predict from".into()))
            } else if i >= tokens.len() {
                Err(Error::Task(format!("response position {i} out of range")))
            } else {
                Ok((i - 1, tokens[i]))
            }
        })
        .collect()
}

/// Mean negative log-likelihood of the response tokens.
pub fn response_cross_entropy(
    g: &mut Graph,
    logits: Var,
    tokens: &[usize],
    response: &[usize],
) -> Result<Var> {
    let targets = response_targets(tokens, response)?;
    g.cross_entropy(logits, &targets)
}
