//! Rotary position embeddings.
//!
//! Dimension pairs `(2i, 2i+1)` of each head are rotated by
//! `pos · base^(-2i/d_head)`. Position 0 is the identity.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone)]
pub struct RopeTable {
    d_head: usize,
    cos: Vec<Float>,
    sin: Vec<Float>,
}

impl RopeTable {
    pub fn new(positions: &[usize], d_head: usize, base: Float) -> Result<Self> {
        if d_head == 0 || d_head % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head dim, got {d_head}")));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as Float / d_head as Float);
                let angle = p as Float * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self { d_head, cos, sin })
    }

    pub fn positions(&self) -> usize {
        self.cos.len() / (self.d_head / 2)
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Rotate rows of `data` (T × n_heads·d_head) in place; `inverse` undoes it.
    pub(crate) fn rotate(&self, data: &mut [Float], n_heads: usize, inverse: bool) {
        let half = self.d_head / 2;
        let width = n_heads * self.d_head;
        for (t, row) in data.chunks_mut(width).enumerate() {
            let cs = &self.cos[t * half..(t + 1) * half];
            let sn = &self.sin[t * half..(t + 1) * half];
            for head in row.chunks_mut(self.d_head) {
                for i in 0..half {
                    let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                    let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = x0 * c - x1 * s;
                    head[2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Rotate a single-head `T × d_head` block at the given positions.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: Float) -> Result<Tensor> {
    let (t, d) = x.require_2d("rope_apply")?;
    if positions.len() != t {
        return Err(Error::Dimension(format!(
            "rope_apply: {} positions for {t} rows",
            positions.len()
        )));
    }
    let table = RopeTable::new(positions, d, base)?;
    let mut out = x.clone();
    table.rotate(out.data_mut(), 1, false);
    Ok(out)
}
