//! Three operations for the static page in `www/`. Each returns a JSON
//! string so the page needs no bindings beyond `JSON.parse`.
//!
//! The plain-Rust functions are what the tests call; the `wasm_bindgen`
//! wrappers only convert errors.

use focusft::bilevel::inner_loop;
use focusft::diagnostics::{representative_layer, summarize, QuerySet, DEFAULT_SINK_WINDOW};
use focusft::fastweights::{init_adapters, AdapterConfig};
use focusft::masking::{build_causal_mask, build_focusft_mask, Segmentation};
use focusft::model::{init_model, AttentionTrace, ModelConfig};
use focusft::svg;
use focusft::taskgen::{gen_multiturn_agentic, Vocab};
use focusft::{Float, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_GRID: usize = 64;
const VOCAB: usize = 32;

fn demo_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab_size: VOCAB,
        max_seq_len: 256,
        seed,
        ..ModelConfig::default()
    }
}

fn visibility(m: &Tensor) -> Vec<Vec<u8>> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| u8::from(v == 0.0)).collect())
        .collect()
}

#[derive(Serialize)]
struct MaskGrid {
    labels: String,
    focusft: Vec<Vec<u8>>,
    causal: Vec<Vec<u8>>,
}

/// Visibility grids (1 = visible) for a `C`/`R` string such as `CCCRRCCR`.
pub fn mask_grid_json(labels: &str) -> Result<String, String> {
    let labels: String = labels.chars().filter(|c| !c.is_whitespace()).collect();
    if labels.len() > MAX_GRID {
        return Err(format!("at most {MAX_GRID} positions"));
    }
    let seg = Segmentation::from_compact(&labels).map_err(|e| e.to_string())?;
    let causal = build_causal_mask(seg.len()).map_err(|e| e.to_string())?;
    let grid = MaskGrid {
        labels: seg.compact(),
        focusft: visibility(&build_focusft_mask(&seg)),
        causal: visibility(&causal),
    };
    serde_json::to_string(&grid).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Probe {
    seq_len: usize,
    layer: usize,
    sink_mass_per_layer: Vec<Float>,
    sink_mass_mean: Float,
    context_engagement: Float,
    heatmap_svg: String,
}

/// Traced forward of an untrained model on a synthetic multi-turn sample.
/// `mask` is `causal` or `focusft`.
pub fn attention_probe_json(seed: u64, seq_len: usize, n_turns: usize, mask: &str) -> Result<String, String> {
    let cfg = demo_model(seed);
    if !(32..=cfg.max_seq_len).contains(&seq_len) {
        return Err(format!("sequence length must be within 32..={}", cfg.max_seq_len));
    }
    let vocab = Vocab::new(VOCAB).map_err(|e| e.to_string())?;
    let sample = gen_multiturn_agentic(&vocab, seq_len, n_turns, seed).map_err(|e| e.to_string())?;
    let m = match mask {
        "causal" => build_causal_mask(sample.len()).map_err(|e| e.to_string())?,
        "focusft" => build_focusft_mask(&sample.segmentation),
        other => return Err(format!("unknown mask {other:?}")),
    };
    let w = init_model(&cfg).map_err(|e| e.to_string())?;
    let mut trace = AttentionTrace::new(cfg.n_layers);
    w.logits(&sample.tokens, &m, None, Some(&mut trace)).map_err(|e| e.to_string())?;
    let s = summarize(&trace, &sample.segmentation, &sample.regions, DEFAULT_SINK_WINDOW, QuerySet::Response)
        .map_err(|e| e.to_string())?;
    let layer = representative_layer(cfg.n_layers);
    let head_mean = trace.head_mean(layer).map_err(|e| e.to_string())?;
    let probe = Probe {
        seq_len: sample.len(),
        layer,
        sink_mass_per_layer: s.sink_mass_per_layer,
        sink_mass_mean: s.sink_mass_mean,
        context_engagement: s.context_engagement,
        heatmap_svg: svg::heatmap(&format!("{mask} mask, layer {layer}"), &head_mean, &sample.regions.boundaries()),
    };
    serde_json::to_string(&probe).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Trajectory {
    losses: Vec<Float>,
    grad_norms: Vec<Float>,
    chart_svg: String,
}

/// `L_inner` along K clipped SGD steps on fresh fast weights.
pub fn inner_trajectory_json(seed: u64, k: usize, eta_in: Float, bidirectional: bool) -> Result<String, String> {
    if k > 32 {
        return Err("at most 32 inner steps".into());
    }
    let cfg = demo_model(seed);
    let vocab = Vocab::new(VOCAB).map_err(|e| e.to_string())?;
    let sample = gen_multiturn_agentic(&vocab, 96, 3, seed).map_err(|e| e.to_string())?;
    let mask = if bidirectional {
        build_focusft_mask(&sample.segmentation)
    } else {
        build_causal_mask(sample.len()).map_err(|e| e.to_string())?
    };
    let w = init_model(&cfg).map_err(|e| e.to_string())?;
    let ad = AdapterConfig { rank: 4, alpha: 8.0, layer_fraction: 0.5, targets: None, seed };
    let phi = init_adapters(&ad, &cfg).map_err(|e| e.to_string())?;
    let r = inner_loop(&w, phi, &sample.tokens, &sample.segmentation.response_positions(), &mask, k, eta_in, 1.0)
        .map_err(|e| e.to_string())?;
    let points = r.losses.iter().enumerate().map(|(i, l)| (i as f64, *l as f64)).collect();
    let chart_svg = svg::line_plot("Inner loss", "inner step", "loss", &[svg::Series { name: "L_inner", points }]);
    serde_json::to_string(&Trajectory {
        losses: r.losses,
        grad_norms: r.grad_norms,
        chart_svg,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn mask_grid(labels: &str) -> Result<String, JsError> {
    mask_grid_json(labels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attention_probe(seed: u32, seq_len: usize, n_turns: usize, mask: &str) -> Result<String, JsError> {
    attention_probe_json(seed as u64, seq_len, n_turns, mask).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn inner_trajectory(seed: u32, k: usize, eta_in: f64, bidirectional: bool) -> Result<String, JsError> {
    inner_trajectory_json(seed as u64, k, eta_in as Float, bidirectional).map_err(|e| JsError::new(&e))
}
