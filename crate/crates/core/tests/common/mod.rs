#![allow(dead_code)]

use focusft::autodiff::Graph;
use focusft::fastweights::AdapterSet;
use focusft::model::{forward, response_cross_entropy, ModelConfig, ModelWeights};
use focusft::{Float, Tensor};

pub fn grad_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 24,
        max_seq_len: 32,
        seed: 77,
        ..ModelConfig::default()
    }
}

/// Loss value only, no tape kept.
pub fn loss_value(
    w: &ModelWeights,
    adapters: Option<&AdapterSet>,
    tokens: &[usize],
    mask: &Tensor,
    response: &[usize],
) -> Float {
    let mut g = Graph::new();
    let m = w.bind(&mut g, false).unwrap();
    let a = adapters.map(|a| a.bind(&mut g, false).unwrap());
    let logits = forward(&mut g, &m, tokens, mask, a.as_ref(), None).unwrap();
    let loss = response_cross_entropy(&mut g, logits, tokens, response).unwrap();
    g.value(loss).item()
}

/// Relative error with a floor so near-zero gradients are compared absolutely.
pub fn rel_err(analytic: Float, numeric: Float) -> Float {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central differences over every entry of every base parameter.
pub fn fd_theta_grads(
    w: &ModelWeights,
    adapters: Option<&AdapterSet>,
    tokens: &[usize],
    mask: &Tensor,
    response: &[usize],
    h: Float,
) -> Vec<Tensor> {
    let mut probe = w.clone();
    let shapes: Vec<Vec<usize>> = w
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut out = Vec::new();
    for (pi, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut grad = Tensor::zeros(shape);
        for k in 0..n {
            let orig = probe.params_mut()[pi].data()[k];
            probe.params_mut()[pi].data_mut()[k] = orig + h;
            let up = loss_value(&probe, adapters, tokens, mask, response);
            probe.params_mut()[pi].data_mut()[k] = orig - h;
            let down = loss_value(&probe, adapters, tokens, mask, response);
            probe.params_mut()[pi].data_mut()[k] = orig;
            grad.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> Float {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(x, y)| rel_err(*x, *y)))
        .fold(0.0, Float::max)
}
