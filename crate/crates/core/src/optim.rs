//! Gradient clipping, SGD/AdamW, and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: Float) -> Float {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn global_norm(grads: &[Tensor]) -> Float {
    grads.iter().map(Tensor::sq_norm).sum::<Float>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: Float,
    pub betas: (Float, Float),
    pub eps: Float,
    pub weight_decay: Float,
    step_count: u64,
    first: Vec<Vec<Float>>,
    second: Vec<Vec<Float>>,
}

impl OptimizerState {
    pub fn sgd(lr: Float) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            betas: (0.0, 0.0),
            eps: 0.0,
            weight_decay: 0.0,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn adamw(lr: Float, betas: (Float, Float), weight_decay: Float) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            betas,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. Moment buffers are sized on first use and must keep
    /// matching the parameter list afterwards.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::State(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::State(format!(
                    "param {i} has {} elements, grad has {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::AdamW => self.adamw_step(params, grads)?,
        }
        self.step_count += 1;
        Ok(())
    }

    fn adamw_step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::State("moment buffers do not match parameters".into()));
        }
        let (b1, b2) = self.betas;
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            // Gains and other vectors are not decayed.
            let decay = if p.shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            for (((w, d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * d;
                *vi = b2 * *vi + (1.0 - b2) * d * d;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * decay * *w;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay to zero, on a 1-based step grid.
///
/// `lr_at(1)` is the first optimizer step; `lr_at(warmup)` is the peak and
/// `lr_at(total)` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub peak: Float,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl WarmupCosine {
    pub fn new(peak: Float, total_steps: usize, warmup_fraction: Float) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as Float).ceil() as usize).min(total_steps);
        Self {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> Float {
        let s = step.clamp(1, self.total_steps.max(1));
        if self.warmup_steps > 0 && s <= self.warmup_steps {
            return self.peak * s as Float / self.warmup_steps as Float;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let progress = (s - self.warmup_steps) as Float / span as Float;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI as Float * progress).cos())
    }
}
