//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node that
//! stores its forward value and whatever it needs for the backward rule;
//! parents always precede children, so `backward` is one reverse sweep
//! over the node list. Leaves created with `requires_grad` collect
//! gradients that persist (and accumulate) across `backward` calls until
//! [`Graph::zero_grad`].
//!
//! Nodes whose inputs are all constants are not differentiated at all,
//! which is what keeps frozen-weight passes cheap.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::rope::RopeTable;
use crate::tensor::{Float, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn graph_id(&self) -> u64 {
        self.graph
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        alpha: Float,
    },
    Add(usize, usize),
    Mul(usize, usize),
    MulRow {
        x: usize,
        g: usize,
    },
    Scale {
        x: usize,
        c: Float,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        inv_rms: Vec<Float>,
    },
    Gelu(usize),
    Silu(usize),
    Rope {
        x: usize,
        table: Rc<RopeTable>,
        n_heads: usize,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<(usize, usize)>,
        probs: Vec<Float>,
    },
    Sum(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Additive value used for masked attention logits.
pub const MASK_NEG: Float = -1e9;

/// Masked cells are anything at or below half the mask constant.
pub fn is_masked(v: Float) -> bool {
    v <= MASK_NEG * 0.5
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    frozen: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            frozen: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Toggle NaN/Inf detection after every forward op.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Stop recording. Further ops fail; backward and reads still work.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// True if `var` was recorded on this graph.
    pub fn owns(&self, var: Var) -> bool {
        var.graph == self.id && var.index < self.nodes.len()
    }

    /// Handle for the node at `index`, for walking [`Graph::parents`].
    pub fn var_at(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var {
            graph: self.id,
            index,
        })
    }

    /// Whether any gradient can flow into `var`.
    pub fn requires_grad(&self, var: Var) -> bool {
        self.owns(var) && self.nodes[var.index].requires_grad
    }

    /// Parent node indices of `var`; leaves have none.
    pub fn parents(&self, var: Var) -> Vec<usize> {
        if !self.owns(var) {
            return Vec::new();
        }
        match &self.nodes[var.index].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulRow { x, g } => vec![*x, *g],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Scale { x, .. }
            | Op::SliceCols { x, .. }
            | Op::RmsNorm { x, .. }
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Rope { x, .. }
            | Op::Softmax(x)
            | Op::CrossEntropy { logits: x, .. }
            | Op::Sum(x) => vec![*x],
        }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert!(self.owns(var), "variable from another graph");
        &self.nodes[var.index].value
    }

    /// Accumulated gradient of a leaf, if it received any.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        if !self.owns(var) {
            return None;
        }
        self.leaf_grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut() {
            *g = None;
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.graph != self.id {
            return Err(Error::Usage(format!(
                "variable belongs to graph {}, not {}",
                var.graph, self.id
            )));
        }
        if var.index >= self.nodes.len() {
            return Err(Error::Usage("dangling variable".into()));
        }
        Ok(var.index)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &str) -> Result<Var> {
        if self.frozen {
            return Err(Error::Usage("graph is frozen".into()));
        }
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var {
            graph: self.id,
            index,
        })
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, value, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, 1.0)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true, 1.0)
    }

    /// `alpha · a · b` (or `alpha · a · bᵀ` when `trans_b`).
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool, alpha: Float) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.val(ia).require_2d("matmul lhs")?;
        let (br, bc) = self.val(ib).require_2d("matmul rhs")?;
        let (k2, n, b_strides) = if trans_b {
            (bc, br, (1, bc))
        } else {
            (br, bc, (bc, 1))
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            alpha,
            self.val(ia).data(),
            (k, 1),
            self.val(ib).data(),
            b_strides,
            0.0,
            out.data_mut(),
            (n, 1),
        );
        let rg = self.rg(&[ia, ib]);
        self.push(
            Op::MatMul {
                a: ia,
                b: ib,
                trans_b,
                alpha,
            },
            out,
            rg,
            "matmul",
        )
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(ia).shape(),
                self.val(ib).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "add")?;
        let mut out = self.val(ia).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.val(ib).data()) {
            *o += y;
        }
        let rg = self.rg(&[ia, ib]);
        self.push(Op::Add(ia, ib), out, rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, "mul")?;
        let mut out = self.val(ia).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.val(ib).data()) {
            *o *= y;
        }
        let rg = self.rg(&[ia, ib]);
        self.push(Op::Mul(ia, ib), out, rg, "mul")
    }

    /// Scale every row of `x` (r×c) elementwise by `g` (length c).
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(g)?);
        let (_, c) = self.val(ix).require_2d("mul_row")?;
        if self.val(ig).len() != c {
            return Err(Error::Dimension(format!(
                "mul_row: gain length {} vs {c} columns",
                self.val(ig).len()
            )));
        }
        let mut out = self.val(ix).clone();
        let gain = self.val(ig).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, gv) in row.iter_mut().zip(gain) {
                *o *= gv;
            }
        }
        let rg = self.rg(&[ix, ig]);
        self.push(Op::MulRow { x: ix, g: ig }, out, rg, "mul_row")
    }

    pub fn scale(&mut self, x: Var, c: Float) -> Result<Var> {
        let ix = self.check(x)?;
        let mut out = self.val(ix).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[ix]);
        self.push(Op::Scale { x: ix, c }, out, rg, "scale")
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (r, c) = self.val(ix).require_2d("slice_cols")?;
        if start + width > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {c} columns",
                start + width
            )));
        }
        let src = self.val(ix).data();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let out = Tensor::new(vec![r, width], data)?;
        let rg = self.rg(&[ix]);
        self.push(Op::SliceCols { x: ix, start }, out, rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let r = self.val(first).require_2d("concat_cols")?.0;
        let mut total = 0;
        for &i in &idx {
            let (ri, ci) = self.val(i).require_2d("concat_cols")?;
            if ri != r {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            total += ci;
        }
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &i in &idx {
                data.extend_from_slice(self.val(i).row(row));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(&idx);
        self.push(Op::ConcatCols(idx), out, rg, "concat_cols")
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let (v, d) = self.val(it).require_2d("gather_rows")?;
        let src = self.val(it);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("row id {id} out of range {v}")));
            }
            data.extend_from_slice(src.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[it]);
        self.push(
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
            out,
            rg,
            "gather_rows",
        )
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, eps: Float) -> Result<Var> {
        let ix = self.check(x)?;
        let (_, c) = self.val(ix).require_2d("rms_norm")?;
        let mut out = self.val(ix).clone();
        let mut inv_rms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let ms = row.iter().map(|v| v * v).sum::<Float>() / c as Float;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        let rg = self.rg(&[ix]);
        self.push(Op::RmsNorm { x: ix, inv_rms }, out, rg, "rms_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut out = self.val(ix).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(&[ix]);
        self.push(Op::Gelu(ix), out, rg, "gelu")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut out = self.val(ix).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= sigmoid(*v));
        let rg = self.rg(&[ix]);
        self.push(Op::Silu(ix), out, rg, "silu")
    }

    /// Rotary embedding applied per head to the columns of `x` (T × n_heads·d_head).
    pub fn rope(&mut self, x: Var, table: Rc<RopeTable>, n_heads: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (t, c) = self.val(ix).require_2d("rope")?;
        if t != table.positions() || c != n_heads * table.d_head() {
            return Err(Error::Dimension(format!(
                "rope: input {t}x{c} vs table {}x{} with {n_heads} heads",
                table.positions(),
                table.d_head()
            )));
        }
        let mut out = self.val(ix).clone();
        table.rotate(out.data_mut(), n_heads, false);
        let rg = self.rg(&[ix]);
        self.push(Op::Rope { x: ix, table, n_heads }, out, rg, "rope")
    }

    /// Row softmax of `x + mask` with masked entries forced to exactly 0.
    ///
    /// `mask` holds 0 for visible cells and [`MASK_NEG`] (or -∞) for hidden
    /// ones. A row with no visible cell is an error.
    pub fn softmax_masked(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let ix = self.check(x)?;
        let (r, c) = self.val(ix).require_2d("softmax")?;
        if mask.shape() != [r, c] {
            return Err(Error::Dimension(format!(
                "softmax mask {:?} vs logits {r}x{c}",
                mask.shape()
            )));
        }
        let out = softmax_rows(self.val(ix), mask)?;
        let rg = self.rg(&[ix]);
        self.push(Op::Softmax(ix), out, rg, "softmax")
    }

    /// Mean over `targets` of `-log softmax(logits[row])[token]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let il = self.check(logits)?;
        let (r, v) = self.val(il).require_2d("cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::Task("cross entropy over no targets".into()));
        }
        let lg = self.val(il);
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut total = 0.0;
        for &(row, tok) in targets {
            if row >= r || tok >= v {
                return Err(Error::Input(format!(
                    "target ({row}, {tok}) outside logits {r}x{v}"
                )));
            }
            let xs = lg.row(row);
            let max = xs.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let sum: Float = xs.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - xs[tok];
            probs.extend(xs.iter().map(|x| (x - max).exp() / sum));
        }
        let loss = total / targets.len() as Float;
        let rg = self.rg(&[il]);
        self.push(
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).data().iter().sum();
        let rg = self.rg(&[ix]);
        self.push(Op::Sum(ix), Tensor::scalar(s), rg, "sum")
    }

    /// Reverse sweep from a scalar `root`, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ir = self.check(root)?;
        if !self.val(ir).is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.val(ir).shape()
            )));
        }
        if !self.nodes[ir].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<Float>>> = vec![None; ir + 1];
        grads[ir] = Some(vec![1.0]);

        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.leaf_grads[i];
                    match slot {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b),
                        None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                    }
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        macro_rules! acc {
            ($j:expr) => {
                slot(grads, nodes, $j)
            };
        }

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let (a, b, trans_b, alpha) = (*a, *b, *trans_b, *alpha);
                let av = &nodes[a].value;
                let bv = &nodes[b].value;
                let (m, k) = (av.rows(), av.cols());
                let n = nodes[i].value.cols();
                // B viewed as k×n.
                let b_view = if trans_b { (1, k) } else { (n, 1) };
                if wants(a) {
                    // dA (m×k) += alpha · dC (m×n) · Bᵀ (n×k)
                    let da = acc!(a);
                    gemm(
                        m,
                        n,
                        k,
                        alpha,
                        g,
                        (n, 1),
                        bv.data(),
                        (b_view.1, b_view.0),
                        1.0,
                        da,
                        (k, 1),
                    );
                }
                if wants(b) {
                    // dB (k×n view) += alpha · Aᵀ (k×m) · dC (m×n)
                    let db = acc!(b);
                    gemm(
                        k,
                        m,
                        n,
                        alpha,
                        av.data(),
                        (1, k),
                        g,
                        (n, 1),
                        1.0,
                        db,
                        b_view,
                    );
                }
            }
            Op::Add(a, b) => {
                for &p in [*a, *b].iter() {
                    if wants(p) {
                        acc!(p).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let other = nodes[b].value.data();
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(other))
                        .for_each(|(d, (x, y))| *d += x * y);
                }
                if wants(b) {
                    let other = nodes[a].value.data();
                    acc!(b)
                        .iter_mut()
                        .zip(g.iter().zip(other))
                        .for_each(|(d, (x, y))| *d += x * y);
                }
            }
            Op::MulRow { x, g: gain } => {
                let (x, gain) = (*x, *gain);
                let c = nodes[gain].value.len();
                if wants(x) {
                    let gv = nodes[gain].value.data();
                    let dx = acc!(x);
                    for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, go), w) in drow.iter_mut().zip(grow).zip(gv) {
                            *d += go * w;
                        }
                    }
                }
                if wants(gain) {
                    let xv = nodes[x].value.data();
                    let dg = acc!(gain);
                    for (xrow, grow) in xv.chunks(c).zip(g.chunks(c)) {
                        for ((d, go), xe) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += go * xe;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let c = nodes[*x].value.cols();
                    let w = nodes[i].value.cols();
                    let dx = acc!(*x);
                    for (r, grow) in g.chunks(w).enumerate() {
                        let dst = &mut dx[r * c + start..r * c + start + w];
                        dst.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if wants(p) {
                        let dp = acc!(p);
                        for (r, drow) in dp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            drow.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = nodes[*table].value.cols();
                    let dt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::RmsNorm { x, inv_rms } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let c = nodes[i].value.cols();
                    let dx = acc!(*x);
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: Float =
                            yr.iter().zip(gr).map(|(a, b)| a * b).sum::<Float>() / c as Float;
                        for ((d, gy), yy) in dx[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                            *d += inv * (gy - yy * dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = nodes[*x].value.data();
                    acc!(*x)
                        .iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(d, (go, xe))| *d += go * gelu_grad(*xe));
                }
            }
            Op::Silu(x) => {
                if wants(*x) {
                    let xv = nodes[*x].value.data();
                    acc!(*x)
                        .iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(d, (go, xe))| {
                            let s = sigmoid(*xe);
                            *d += go * s * (1.0 + xe * (1.0 - s));
                        });
                }
            }
            Op::Rope { x, table, n_heads } => {
                if wants(*x) {
                    let mut gx = g.to_vec();
                    table.rotate(&mut gx, *n_heads, true);
                    acc!(*x).iter_mut().zip(&gx).for_each(|(d, v)| *d += v);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let c = nodes[i].value.cols();
                    let dx = acc!(*x);
                    for ((drow, yrow), grow) in
                        dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c))
                    {
                        let dot: Float = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, yy), gy) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += yy * (gy - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let v = nodes[*logits].value.cols();
                    let scale = g[0] / targets.len() as Float;
                    let dl = acc!(*logits);
                    for (t, &(row, tok)) in targets.iter().enumerate() {
                        let p = &probs[t * v..(t + 1) * v];
                        let dst = &mut dl[row * v..(row + 1) * v];
                        for (j, (d, pj)) in dst.iter_mut().zip(p).enumerate() {
                            let onehot = if j == tok { 1.0 } else { 0.0 };
                            *d += scale * (pj - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc!(*x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<Float>>], nodes: &[Node], j: usize) -> &'a mut Vec<Float> {
    let len = nodes[j].value.len();
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

/// Masked row softmax on plain tensors (shared by the graph op and oracles).
pub fn softmax_rows(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (r, c) = logits.require_2d("softmax")?;
    if mask.shape() != [r, c] {
        return Err(Error::Dimension(format!(
            "softmax mask {:?} vs logits {r}x{c}",
            mask.shape()
        )));
    }
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let xs = logits.row(i);
        let ms = mask.row(i);
        let mut max = Float::NEG_INFINITY;
        for (x, m) in xs.iter().zip(ms) {
            if !is_masked(*m) {
                max = max.max(x + m);
            }
        }
        if max == Float::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for ((o, x), m) in row.iter_mut().zip(xs).zip(ms) {
            if !is_masked(*m) {
                *o = (x + m - max).exp();
                sum += *o;
            }
        }
        row.iter_mut().for_each(|o| *o /= sum);
    }
    Ok(out)
}

const GELU_K: Float = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: Float) -> Float {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: Float) -> Float {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: Float) -> Float {
    1.0 / (1.0 + (-x).exp())
}
