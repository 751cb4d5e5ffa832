use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, AttentionShape};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `[t, s]` attention mask: `allowed(i, j)` is true when query row `i`
/// may attend to key row `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    t: usize,
    s: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(t: usize, s: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != t * s {
            return Err(Error::Dimension(format!(
                "mask of {} entries for [{t}, {s}]",
                allowed.len()
            )));
        }
        Ok(AttentionMask { t, s, allowed })
    }

    pub fn from_fn(t: usize, s: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(t * s);
        for i in 0..t {
            for j in 0..s {
                allowed.push(f(i, j));
            }
        }
        AttentionMask { t, s, allowed }
    }

    pub fn queries(&self) -> usize {
        self.t
    }

    pub fn keys(&self) -> usize {
        self.s
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.s + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Unary { x: Var, deriv: fn(f64) -> f64 },
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    CausalConv { x: Var, kernel: Var, segments: Option<Rc<[u32]>> },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, mask: Rc<AttentionMask>, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Reshape(Var),
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Nodes are only ever created from existing handles, so
/// every input of node `i` has an index below `i` and insertion order is a
/// topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiation target.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|v| v * c).collect();
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, c), rg)
    }

    /// `z · sigmoid(z)`, elementwise.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&z| z * kernels::sigmoid(z)).collect();
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Silu(x), rg)
    }

    /// Elementwise map with a caller-supplied derivative, evaluated at the input.
    pub fn unary(&mut self, x: Var, f: fn(f64) -> f64, deriv: fn(f64) -> f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&z| f(z)).collect();
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Unary { x, deriv }, rg)
    }

    /// `(silu(x·w_gate) ⊙ (x·w_up))·w_down` for `x` of shape `[t, d]`.
    pub fn swiglu_ffn(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate);
        let up = self.matmul(x, w_up)?;
        let hidden = self.mul(gate, up)?;
        self.matmul(hidden, w_down)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        if !value.is_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let d = value.last_dim();
        let mut data = value.data().to_vec();
        kernels::softmax_rows(&mut data, d);
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x), rg))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::Parameter(format!("rmsnorm eps must be nonnegative, got {eps}")));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(dim_err("rmsnorm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut data = vec![0.0; xv.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            if !inv.is_finite() {
                return Err(Error::Numeric("rmsnorm of an all-zero row with eps = 0".into()));
            }
            inv_rms.push(inv);
            for c in 0..d {
                data[r * d + c] = gv.data()[c] * row[c] * inv;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor { shape, data }, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Depthwise causal convolution over time: `x` is `[t, d]`, `kernel` is
    /// `[k, d]` and output row `i` only sees input rows `≤ i`.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.causal_conv1d_segmented(x, kernel, None)
    }

    /// [`Graph::causal_conv1d`] where taps never read across a change of
    /// segment id; rows of other segments count as zero padding.
    pub fn causal_conv1d_segmented(
        &mut self,
        x: Var,
        kernel: Var,
        segments: Option<Rc<[u32]>>,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[1] {
            return Err(dim_err("causal_conv1d", sx, sk));
        }
        let (t, d, k) = (sx[0], sx[1], sk[0]);
        if let Some(ids) = &segments {
            if ids.len() != t {
                return Err(Error::Dimension(format!("{} segment ids for {t} rows", ids.len())));
            }
        }
        let data = kernels::causal_conv(
            self.value(x).data(),
            self.value(kernel).data(),
            t,
            d,
            k,
            segments.as_deref(),
        );
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Tensor { shape: vec![t, d], data }, Op::CausalConv { x, kernel, segments }, rg))
    }

    /// Rotary embedding on `[t, heads, hd]`, rotating adjacent pairs
    /// `(2i, 2i+1)` by `pos · base^(-2i/hd)` with `pos = row + position_offset`.
    pub fn rope(&mut self, x: Var, base: f64, position_offset: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("rope expects [t, heads, hd], got {shape:?}")));
        }
        let (t, heads, hd) = (shape[0], shape[1], shape[2]);
        if hd % 2 != 0 {
            return Err(Error::Parameter(format!("rope head dim must be even, got {hd}")));
        }
        if !(base > 0.0) {
            return Err(Error::Parameter(format!("rope base must be positive, got {base}")));
        }
        let (cos, sin) = kernels::rope_tables(t, hd, base, position_offset);
        let data = kernels::rope_rotate(self.value(x).data(), t, heads, hd, &cos, &sin, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Rope { x, cos, sin }, rg))
    }

    /// Masked scaled dot-product attention over `[t, heads, hd]` queries and
    /// `[s, heads, hd]` keys/values, scaled by `1/sqrt(hd)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Rc<AttentionMask>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[1..] != sk[1..] {
            return Err(dim_err("attention", sq, sk));
        }
        if mask.queries() != sq[0] || mask.keys() != sk[0] {
            return Err(Error::Dimension(format!(
                "attention mask [{}, {}] for {} queries and {} keys",
                mask.queries(),
                mask.keys(),
                sq[0],
                sk[0]
            )));
        }
        let sh = AttentionShape { t: sq[0], s: sk[0], heads: sq[1], hd: sq[2] };
        let shape = sq.to_vec();
        let (data, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask.as_slice(),
            &sh,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor { shape, data }, Op::Attention { q, k, v, mask, probs }, rg))
    }

    /// Mean over positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let targets: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.cross_entropy_masked(logits, &targets)
    }

    /// Cross entropy averaged over the positions whose target is `Some`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} for {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        let vocab = lv.shape()[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Parameter("cross_entropy with no scored positions".into()));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("cross_entropy logits contain non-finite values".into()));
        }
        let mut probs = lv.data().to_vec();
        kernels::softmax_rows(&mut probs, vocab);
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            if let Some(t) = *target {
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                total += lse - row[t];
            }
        }
        let loss = total / count as f64;
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Row gather from a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be 2-D, got {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Parameter("embedding of an empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        let op = Op::Embedding { table, ids: ids.to_vec() };
        Ok(self.push(Tensor { shape: vec![ids.len(), d], data }, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Stack `a` on top of `b` along the first axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(dim_err("concat_rows", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(a, b), rg))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if len == 0 || start + len > sx[0] {
            return Err(Error::Dimension(format!("slice {start}..{} of {sx:?}", start + len)));
        }
        let row: usize = sx[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = sx;
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceRows { x, start }, rg))
    }

    /// Gradient of `v` after [`Graph::backward`]; `None` when `v` does not
    /// require gradients or received none.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor { shape: self.shape(v).to_vec(), data: g.clone() })
    }

    /// Borrowing variant of [`Graph::grad`].
    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Reverse sweep from a scalar `loss`, seeding `d loss / d loss = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Temporarily take the op so saved activations can be borrowed while
        // gradients of earlier nodes are written.
        let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if nodes[a.0].requires_grad {
                    let bv = nodes[b.0].value.data();
                    acc(nodes, grads, *a, |da| kernels::matmul_nt_acc(g, bv, m, n, k, da));
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    acc(nodes, grads, *b, |db| kernels::matmul_tn_acc(av, g, m, k, n, db));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(nodes, grads, v, |d| kernels::axpy(1.0, g, d));
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(nodes, grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(nodes, grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(nodes, grads, *x, |d| kernels::axpy(c, g, d));
            }
            Op::Silu(x) => {
                let xv = nodes[x.0].value.data();
                acc(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        let s = kernels::sigmoid(xv[i]);
                        d[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                });
            }
            Op::Unary { x, deriv } => {
                let xv = nodes[x.0].value.data();
                let deriv = *deriv;
                acc(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * deriv(xv[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[idx].value.data().to_vec();
                let dim = nodes[idx].value.last_dim();
                acc(nodes, grads, *x, |d| {
                    for r in 0..y.len() / dim {
                        let span = r * dim..(r + 1) * dim;
                        let inner = kernels::dot(&y[span.clone()], &g[span.clone()]);
                        for i in span {
                            d[i] += y[i] * (g[i] - inner);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let dim = gv.len();
                acc(nodes, grads, *x, |d| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let base = r * dim;
                        let mut inner = 0.0;
                        for c in 0..dim {
                            inner += gv[c] * g[base + c] * xv[base + c];
                        }
                        let coef = inv * inv * inv * inner / dim as f64;
                        for c in 0..dim {
                            d[base + c] += inv * gv[c] * g[base + c] - coef * xv[base + c];
                        }
                    }
                });
                acc(nodes, grads, *gain, |d| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let base = r * dim;
                        for c in 0..dim {
                            d[c] += g[base + c] * xv[base + c] * inv;
                        }
                    }
                });
            }
            Op::CausalConv { x, kernel, segments } => {
                let segments = segments.as_deref();
                let (t, dim) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let k = nodes[kernel.0].value.shape()[0];
                let xv = nodes[x.0].value.data();
                let kv = nodes[kernel.0].value.data();
                acc(nodes, grads, *x, |d| {
                    for i in 0..t {
                        for j in 0..k {
                            let Some(src) = kernels::conv_source(i, j, k, segments) else { continue };
                            for c in 0..dim {
                                d[src * dim + c] += kv[j * dim + c] * g[i * dim + c];
                            }
                        }
                    }
                });
                acc(nodes, grads, *kernel, |d| {
                    for i in 0..t {
                        for j in 0..k {
                            let Some(src) = kernels::conv_source(i, j, k, segments) else { continue };
                            for c in 0..dim {
                                d[j * dim + c] += xv[src * dim + c] * g[i * dim + c];
                            }
                        }
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let shape = nodes[x.0].value.shape().to_vec();
                let back = kernels::rope_rotate(g, shape[0], shape[1], shape[2], cos, sin, -1.0);
                acc(nodes, grads, *x, |d| kernels::axpy(1.0, &back, d));
            }
            Op::Attention { q, k, v, mask, probs } => {
                let (sq, sk) = (nodes[q.0].value.shape(), nodes[k.0].value.shape());
                let sh = AttentionShape { t: sq[0], s: sk[0], heads: sq[1], hd: sq[2] };
                let ag = kernels::attention_backward(
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                    mask.as_slice(),
                    probs,
                    g,
                    &sh,
                );
                acc(nodes, grads, *q, |d| kernels::axpy(1.0, &ag.dq, d));
                acc(nodes, grads, *k, |d| kernels::axpy(1.0, &ag.dk, d));
                acc(nodes, grads, *v, |d| kernels::axpy(1.0, &ag.dv, d));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vocab = nodes[logits.0].value.shape()[1];
                let scale = g[0] / *count as f64;
                acc(nodes, grads, *logits, |d| {
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            let base = r * vocab;
                            for c in 0..vocab {
                                d[base + c] += scale * probs[base + c];
                            }
                            d[base + t] -= scale;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.shape()[1];
                acc(nodes, grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * dim..(r + 1) * dim], &mut d[id * dim..(id + 1) * dim]);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Reshape(x) => {
                acc(nodes, grads, *x, |d| kernels::axpy(1.0, g, d));
            }
            Op::ConcatRows(a, b) => {
                let split = nodes[a.0].value.numel();
                acc(nodes, grads, *a, |d| kernels::axpy(1.0, &g[..split], d));
                acc(nodes, grads, *b, |d| kernels::axpy(1.0, &g[split..], d));
            }
            Op::SliceRows { x, start } => {
                let row: usize = nodes[x.0].value.shape()[1..].iter().product();
                let off = start * row;
                acc(nodes, grads, *x, |d| kernels::axpy(1.0, g, &mut d[off..off + g.len()]));
            }
        }
        self.nodes[idx].op = op;
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    contrib(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}
