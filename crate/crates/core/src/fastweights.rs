//! Fast weights: low-rank adapters on the FFN matrices of the top layers.
//!
//! Each hooked matrix `W` gets factors `A` (`in × rank`) and `B`
//! (`rank × out`) and its output becomes `x·W + s·(x·A)·B` with
//! `s = alpha / rank`. `A` is drawn from a seeded normal with std `1/√in`
//! and `B` starts at zero, so a fresh set has no effect on the forward pass
//! while still receiving a nonzero gradient through `B`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{FfnMatrix, ModelConfig};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: Float,
    pub layer_fraction: Float,
    /// FFN matrices to hook; `None` hooks every FFN matrix of the model.
    pub targets: Option<Vec<FfnMatrix>>,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            layer_fraction: 0.5,
            targets: None,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> Float {
        self.alpha / self.rank as Float
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter.rank must be at least 1".into()));
        }
        if !(self.layer_fraction > 0.0 && self.layer_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "adapter.layer_fraction {} must be in (0, 1]",
                self.layer_fraction
            )));
        }
        select_layers(model.n_layers, self.layer_fraction)?;
        let available = model.ffn_matrices();
        for m in self.target_list(model) {
            let Some(&(_, i, o)) = available.iter().find(|(k, _, _)| *k == m) else {
                return Err(Error::Config(format!(
                    "adapter target {} is not part of this FFN",
                    m.name()
                )));
            };
            if self.rank > i.min(o) {
                return Err(Error::Config(format!(
                    "adapter.rank {} exceeds min dimension {} of {}",
                    self.rank,
                    i.min(o),
                    m.name()
                )));
            }
        }
        Ok(())
    }

    pub fn target_list(&self, model: &ModelConfig) -> Vec<FfnMatrix> {
        match &self.targets {
            Some(t) => {
                let mut t = t.clone();
                t.sort();
                t.dedup();
                t
            }
            None => model.ffn_matrices().into_iter().map(|(m, _, _)| m).collect(),
        }
    }
}

/// The `round(fraction · n_layers)` highest-indexed layers (0-based).
pub fn select_layers(n_layers: usize, layer_fraction: Float) -> Result<Vec<usize>> {
    if n_layers == 0 {
        return Err(Error::Config("model has no layers".into()));
    }
    let count = (layer_fraction * n_layers as Float).round() as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "layer fraction {layer_fraction} selects no layers out of {n_layers}"
        )));
    }
    let count = count.min(n_layers);
    Ok((n_layers - count..n_layers).collect())
}

/// Mix a run seed and a step index into a per-step seed (splitmix64).
pub fn derive_seed(run_seed: u64, step: u64) -> u64 {
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub layer: usize,
    pub matrix: FfnMatrix,
    pub a: Tensor,
    pub b: Tensor,
}

/// Fast weights φ for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub scaling: Float,
    pub adapters: Vec<Adapter>,
}

pub fn init_adapters(config: &AdapterConfig, model: &ModelConfig) -> Result<AdapterSet> {
    config.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = model.ffn_matrices();
    let targets = config.target_list(model);
    let mut adapters = Vec::new();
    for layer in select_layers(model.n_layers, config.layer_fraction)? {
        for &m in &targets {
            let &(_, fan_in, fan_out) = dims.iter().find(|(k, _, _)| *k == m).expect("validated");
            let std = 1.0 / (fan_in as Float).sqrt();
            adapters.push(Adapter {
                layer,
                matrix: m,
                a: Tensor::randn(&[fan_in, config.rank], std, &mut rng),
                b: Tensor::zeros(&[config.rank, fan_out]),
            });
        }
    }
    Ok(AdapterSet {
        config: config.clone(),
        scaling: config.scaling(),
        adapters,
    })
}

/// A fresh set with `seed`; nothing from the previous set survives.
pub fn reset(adapters: AdapterSet, model: &ModelConfig, seed: u64) -> Result<AdapterSet> {
    let config = AdapterConfig {
        seed,
        ..adapters.config
    };
    init_adapters(&config, model)
}

/// `scaling · (x·A)·B` for a registered hook.
pub fn adapter_delta(
    adapters: &AdapterSet,
    layer: usize,
    matrix: FfnMatrix,
    x: &Tensor,
) -> Result<Tensor> {
    let ad = adapters.get(layer, matrix).ok_or_else(|| {
        Error::Usage(format!(
            "no adapter registered on layer {layer} {}",
            matrix.name()
        ))
    })?;
    let xa = crate::tensor::matmul(x, &ad.a)?;
    let mut out = crate::tensor::matmul(&xa, &ad.b)?;
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v *= adapters.scaling);
    Ok(out)
}

impl AdapterSet {
    pub fn get(&self, layer: usize, matrix: FfnMatrix) -> Option<&Adapter> {
        self.adapters
            .iter()
            .find(|a| a.layer == layer && a.matrix == matrix)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.adapters.iter().map(|a| a.layer).collect();
        l.dedup();
        l
    }

    /// Lowest hooked layer; layers below it are untouched by the adapters.
    pub fn first_layer(&self) -> Option<usize> {
        self.adapters.iter().map(|a| a.layer).min()
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// Factors in `(A, B)` order per adapter.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.adapters.iter().flat_map(|a| [&a.a, &a.b]).collect()
    }

    /// Largest entry of any dense delta `s·A·B`; zero for a fresh set.
    pub fn max_abs_delta(&self) -> Result<Float> {
        let mut worst: Float = 0.0;
        for ad in &self.adapters {
            let dense = crate::tensor::matmul(&ad.a, &ad.b)?;
            for v in dense.data() {
                worst = worst.max((v * self.scaling).abs());
            }
        }
        Ok(worst)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundAdapters> {
        let mut hooks = Vec::with_capacity(self.adapters.len());
        for ad in &self.adapters {
            hooks.push(AdapterHook {
                layer: ad.layer,
                matrix: ad.matrix,
                a: g.leaf(ad.a.clone(), trainable)?,
                b: g.leaf(ad.b.clone(), trainable)?,
                scaling: self.scaling,
            });
        }
        Ok(BoundAdapters { hooks })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterHook {
    pub layer: usize,
    pub matrix: FfnMatrix,
    pub a: Var,
    pub b: Var,
    pub scaling: Float,
}

impl AdapterHook {
    pub fn delta(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xa = g.matmul(x, self.a)?;
        g.matmul_ext(xa, self.b, false, self.scaling)
    }
}

/// Adapter factors recorded on one graph.
#[derive(Debug, Clone)]
pub struct BoundAdapters {
    pub hooks: Vec<AdapterHook>,
}

impl BoundAdapters {
    pub fn hook(&self, layer: usize, matrix: FfnMatrix) -> Option<&AdapterHook> {
        self.hooks
            .iter()
            .find(|h| h.layer == layer && h.matrix == matrix)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.hooks.iter().flat_map(|h| [h.a, h.b]).collect()
    }

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
