//! Append-only computation graph with reverse-mode differentiation.
//!
//! Node values live in f64; leaves are created from f32 tensors (or raw f64
//! buffers for finite-difference checks) and results are rounded back to f32
//! when read out with [`Graph::value`]. Inputs always have smaller ids than the
//! node that consumes them, so a reverse sweep over ids is a valid topological
//! order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    ModLayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    Rope {
        x: Var,
        heads: usize,
        positions: Vec<f64>,
    },
    SplitHeads(Var, usize),
    MergeHeads(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::ModLayerNorm { .. } => "modulated_layer_norm",
            Op::Attention { .. } => "attention",
            Op::Rope { .. } => "rope",
            Op::SplitHeads(..) => "split_heads",
            Op::MergeHeads(..) => "merge_heads",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient slots produced by [`Graph::backward`], one per node.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.slots[v.0].as_ref().map(|g| Tensor::from_f64(&self.shapes[v.0], g))
    }

    pub fn get_f64(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }

    pub fn take_f64(&mut self, v: Var) -> Option<Vec<f64>> {
        self.slots[v.0].take()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Interprets a rank-1 or rank-2 shape as (rows, cols).
fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [c] => Some((1, c)),
        [r, c] => Some((r, c)),
        _ => None,
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var]) -> Var {
        self.push_shared(op, shape, Arc::new(value), inputs)
    }

    fn push_shared(&mut self, op: Op, shape: Vec<usize>, value: Arc<Vec<f64>>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.to_f64(), &[])
    }

    /// Differentiable input from raw f64 values (no f32 rounding).
    pub fn leaf_f64(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "leaf shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, &[]))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Const, t.shape().to_vec(), t.to_f64(), &[])
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Const, shape.to_vec(), data, &[])
    }

    /// Leaf or constant over a buffer shared with other graphs.
    pub fn shared(&mut self, shape: &[usize], data: Arc<Vec<f64>>, requires_grad: bool) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let op = if requires_grad { Op::Leaf } else { Op::Const };
        self.push_shared(op, shape.to_vec(), data, &[])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_f64(&n.shape, &n.value)
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vals(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.tag(), a, b)?;
        let value = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.vals(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, s), shape, value, &[a])
    }

    fn row_broadcast(&mut self, x: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let tag = op.tag();
        let (_, c) = rows_cols(self.shape(x)).ok_or_else(|| Error::shape(tag, self.shape(x), self.shape(b)))?;
        if self.shape(b) != [c] {
            return Err(Error::shape(tag, self.shape(x), self.shape(b)));
        }
        let bv = self.vals(b);
        let value = self
            .vals(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&r, &s)| f(r, s)))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(op, shape, value, &[x, b]))
    }

    /// x[L×d] + b[d] broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, Op::AddRow(x, b), |r, s| r + s)
    }

    /// x[L×d] ⊙ g[d] broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast(x, g, Op::MulRow(x, g), |r, s| r * s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape("matmul", sa, sb)),
        };
        let value = kernels::matmul(self.vals(a), self.vals(b), m, k, n);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], value, &[a, b]))
    }

    /// x·W + b for x[L×in], W[in×out], b[out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.vals(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), kernels::silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    /// Per-row layer norm followed by `(1 + scale) * x̂ + shift`.
    pub fn modulated_layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::domain(format!("layer norm eps must be positive, got {eps}")));
        }
        let (rows, d) = rows_cols(self.shape(x))
            .ok_or_else(|| Error::shape("modulated_layer_norm", self.shape(x), self.shape(scale)))?;
        for p in [scale, shift] {
            if self.shape(p) != [d] {
                return Err(Error::shape("modulated_layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.vals(x);
        let sc = self.vals(scale);
        let sh = self.vals(shift);
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = (1.0 + sc[j]) * h + sh[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::ModLayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            shape,
            out,
            &[x, scale, shift],
        ))
    }

    /// softmax(q kᵀ / √d) v per head, for q, k, v shaped [h×L×d].
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (h, lq, d) = match *self.shape(q) {
            [h, l, d] => (h, l, d),
            _ => return Err(Error::shape("attention", self.shape(q), self.shape(k))),
        };
        let (lk, dv) = match (self.shape(k), self.shape(v)) {
            (&[hk, lk, dk], &[hv, lv, dv]) if hk == h && hv == h && dk == d && lv == lk => (lk, dv),
            _ => return Err(Error::shape("attention", self.shape(k), self.shape(v))),
        };
        if d == 0 || lq == 0 || lk == 0 {
            return Err(Error::EmptyInput {
                op: "attention",
                detail: format!("L={lq}, d={d}"),
            });
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.vals(q), self.vals(k), self.vals(v));
        let mut probs = Vec::with_capacity(h * lq * lk);
        let mut out = Vec::with_capacity(h * lq * dv);
        for head in 0..h {
            let qh = &qv[head * lq * d..(head + 1) * lq * d];
            let kh = &kv[head * lk * d..(head + 1) * lk * d];
            let vh = &vv[head * lk * dv..(head + 1) * lk * dv];
            let mut s = kernels::matmul_a_bt(qh, kh, lq, d, lk);
            s.iter_mut().for_each(|x| *x *= scale);
            kernels::softmax_rows(&mut s, lk);
            out.extend(kernels::matmul(&s, vh, lq, lk, dv));
            probs.extend(s);
        }
        Ok(self.push(Op::Attention { q, k, v, probs }, vec![h, lq, dv], out, &[q, k, v]))
    }

    /// Rotary position phase on x[L × heads·d]: each adjacent channel pair
    /// inside a head is rotated by `positions[row] * freq(pair)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: Vec<f64>) -> Result<Var> {
        let (l, width) = match *self.shape(x) {
            [l, w] => (l, w),
            _ => return Err(Error::contract("rope expects a rank-2 input")),
        };
        if heads == 0 || width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(Error::contract(format!(
                "rope needs an even head width; width {width}, heads {heads}"
            )));
        }
        if positions.len() != l {
            return Err(Error::contract(format!(
                "rope got {} positions for {l} rows",
                positions.len()
            )));
        }
        let hd = width / heads;
        let xv = self.vals(x);
        let mut out = vec![0.0; l * width];
        for (r, &pos) in positions.iter().enumerate() {
            for head in 0..heads {
                for i in 0..hd / 2 {
                    let a = pos * kernels::rope_freq(i, hd);
                    let (s, c) = (libm::sin(a), libm::cos(a));
                    let j = r * width + head * hd + 2 * i;
                    let (x0, x1) = (xv[j], xv[j + 1]);
                    out[j] = x0 * c - x1 * s;
                    out[j + 1] = x0 * s + x1 * c;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Rope { x, heads, positions }, shape, out, &[x]))
    }

    /// [L × h·d] → [h × L × d]
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (l, w) = match *self.shape(x) {
            [l, w] if heads > 0 && w % heads == 0 => (l, w),
            _ => {
                return Err(Error::contract(format!(
                    "cannot split {:?} into {heads} heads",
                    self.shape(x)
                )))
            }
        };
        let d = w / heads;
        let xv = self.vals(x);
        let mut out = vec![0.0; l * w];
        for r in 0..l {
            for h in 0..heads {
                out[h * l * d + r * d..h * l * d + (r + 1) * d]
                    .copy_from_slice(&xv[r * w + h * d..r * w + (h + 1) * d]);
            }
        }
        Ok(self.push(Op::SplitHeads(x, heads), vec![heads, l, d], out, &[x]))
    }

    /// [h × L × d] → [L × h·d]
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let (h, l, d) = match *self.shape(x) {
            [h, l, d] => (h, l, d),
            _ => return Err(Error::contract("merge_heads expects a rank-3 input")),
        };
        let xv = self.vals(x);
        let w = h * d;
        let mut out = vec![0.0; l * w];
        for hh in 0..h {
            for r in 0..l {
                out[r * w + hh * d..r * w + (hh + 1) * d]
                    .copy_from_slice(&xv[hh * l * d + r * d..hh * l * d + (r + 1) * d]);
            }
        }
        Ok(self.push(Op::MergeHeads(x), vec![l, w], out, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = match *self.shape(first) {
            [_, c] => c,
            _ => return Err(Error::contract("concat_rows expects matrices")),
        };
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            match *self.shape(p) {
                [r, c] if c == cols => rows += r,
                _ => return Err(Error::shape("concat_rows", self.shape(first), self.shape(p))),
            }
            value.extend_from_slice(self.vals(p));
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, cols], value, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => return Err(Error::contract("slice_rows expects a matrix")),
        };
        if len == 0 || start + len > r {
            return Err(Error::contract(format!(
                "row slice {start}..{} out of 0..{r}",
                start + len
            )));
        }
        let value = self.vals(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows(x, start), vec![len, c], value, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = match *self.shape(first) {
            [r, _] => r,
            _ => return Err(Error::contract("concat_cols expects matrices")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [r, c] if r == rows => widths.push(c),
                _ => return Err(Error::shape("concat_cols", self.shape(first), self.shape(p))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.vals(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![rows, total], value, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => return Err(Error::contract("slice_cols expects a matrix")),
        };
        if len == 0 || start + len > c {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of 0..{c}",
                start + len
            )));
        }
        let xv = self.vals(x);
        let value = (0..r)
            .flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(Op::SliceCols(x, start), vec![r, len], value, &[x]))
    }

    /// Mean over rows: [L×d] → [d].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x)).ok_or_else(|| Error::contract("mean_rows expects a matrix"))?;
        let xv = self.vals(x);
        let mut value = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for (a, &b) in value.iter_mut().zip(row) {
                *a += b;
            }
        }
        value.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push(Op::MeanRows(x), vec![c], value, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().sum();
        self.push(Op::Sum(x), vec![], vec![s], &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.vals(x).len() as f64;
        let s = self.vals(x).iter().sum::<f64>() / n;
        self.push(Op::Mean(x), vec![], vec![s], &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.vals(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.vals(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape.to_vec(), value, &[x]))
    }

    /// mean((a - b)²) as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = slots[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &gy, &mut slots);
            }
            slots[id] = Some(gy);
        }
        // Constants never carry gradients, and nothing past the loss does.
        for (id, slot) in slots.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *slot = None;
            }
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { slots, shapes })
    }

    fn propagate(&self, node: &Node, gy: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut slots[a.0], gy);
                }
                if wants(*b) {
                    accumulate(&mut slots[b.0], gy);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut slots[a.0], gy);
                }
                if wants(*b) {
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    accumulate(&mut slots[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                if wants(*a) {
                    let ga: Vec<f64> = gy.iter().zip(bv).map(|(g, y)| g * y).collect();
                    accumulate(&mut slots[a.0], &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = gy.iter().zip(av).map(|(g, x)| g * x).collect();
                    accumulate(&mut slots[b.0], &gb);
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = gy.iter().map(|g| g * s).collect();
                accumulate(&mut slots[a.0], &ga);
            }
            Op::AddRow(x, b) => {
                let c = self.shape(*b)[0];
                if wants(*x) {
                    accumulate(&mut slots[x.0], gy);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; c];
                    for row in gy.chunks_exact(c) {
                        for (a, &g) in gb.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    accumulate(&mut slots[b.0], &gb);
                }
            }
            Op::MulRow(x, s) => {
                let c = self.shape(*s)[0];
                let (xv, sv) = (self.vals(*x), self.vals(*s));
                if wants(*x) {
                    let gx: Vec<f64> = gy
                        .chunks_exact(c)
                        .flat_map(|row| row.iter().zip(sv).map(|(g, s)| g * s))
                        .collect();
                    accumulate(&mut slots[x.0], &gx);
                }
                if wants(*s) {
                    let mut gs = vec![0.0; c];
                    for (grow, xrow) in gy.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for j in 0..c {
                            gs[j] += grow[j] * xrow[j];
                        }
                    }
                    accumulate(&mut slots[s.0], &gs);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let ga = kernels::matmul_a_bt(gy, self.vals(*b), m, n, k);
                    accumulate(&mut slots[a.0], &ga);
                }
                if wants(*b) {
                    let gb = kernels::matmul_at_b(self.vals(*a), gy, m, k, n);
                    accumulate(&mut slots[b.0], &gb);
                }
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(self.vals(*a))
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                accumulate(&mut slots[a.0], &ga);
            }
            Op::Silu(a) => {
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(self.vals(*a))
                    .map(|(g, &x)| g * kernels::silu_grad(x))
                    .collect();
                accumulate(&mut slots[a.0], &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(node.value.iter())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                accumulate(&mut slots[a.0], &ga);
            }
            Op::ModLayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*scale)[0];
                let sc = self.vals(*scale);
                if wants(*shift) {
                    let mut gs = vec![0.0; d];
                    for row in gy.chunks_exact(d) {
                        for (a, &g) in gs.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    accumulate(&mut slots[shift.0], &gs);
                }
                if wants(*scale) {
                    let mut gs = vec![0.0; d];
                    for (grow, hrow) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gs[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(&mut slots[scale.0], &gs);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    for (r, (grow, hrow)) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let gh: Vec<f64> = grow.iter().zip(sc).map(|(g, s)| g * (1.0 + s)).collect();
                        let mean_g = gh.iter().sum::<f64>() / d as f64;
                        let mean_gh = gh.iter().zip(hrow).map(|(g, h)| g * h).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gh[j] - mean_g - hrow[j] * mean_gh);
                        }
                    }
                    accumulate(&mut slots[x.0], &gx);
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (h, lq, d) = (self.shape(*q)[0], self.shape(*q)[1], self.shape(*q)[2]);
                let lk = self.shape(*k)[1];
                let dv = self.shape(*v)[2];
                let scale = 1.0 / (d as f64).sqrt();
                let (qv, kv, vv) = (self.vals(*q), self.vals(*k), self.vals(*v));
                let mut gq = vec![0.0; h * lq * d];
                let mut gk = vec![0.0; h * lk * d];
                let mut gv = vec![0.0; h * lk * dv];
                for head in 0..h {
                    let p = &probs[head * lq * lk..(head + 1) * lq * lk];
                    let go = &gy[head * lq * dv..(head + 1) * lq * dv];
                    let qh = &qv[head * lq * d..(head + 1) * lq * d];
                    let kh = &kv[head * lk * d..(head + 1) * lk * d];
                    let vh = &vv[head * lk * dv..(head + 1) * lk * dv];
                    gv[head * lk * dv..(head + 1) * lk * dv].copy_from_slice(&kernels::matmul_at_b(p, go, lq, lk, dv));
                    let gp = kernels::matmul_a_bt(go, vh, lq, dv, lk);
                    let mut gs = vec![0.0; lq * lk];
                    for i in 0..lq {
                        let prow = &p[i * lk..(i + 1) * lk];
                        let grow = &gp[i * lk..(i + 1) * lk];
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..lk {
                            gs[i * lk + j] = prow[j] * (grow[j] - dot) * scale;
                        }
                    }
                    gq[head * lq * d..(head + 1) * lq * d].copy_from_slice(&kernels::matmul(&gs, kh, lq, lk, d));
                    gk[head * lk * d..(head + 1) * lk * d].copy_from_slice(&kernels::matmul_at_b(&gs, qh, lq, lk, d));
                }
                if wants(*q) {
                    accumulate(&mut slots[q.0], &gq);
                }
                if wants(*k) {
                    accumulate(&mut slots[k.0], &gk);
                }
                if wants(*v) {
                    accumulate(&mut slots[v.0], &gv);
                }
            }
            Op::Rope { x, heads, positions } => {
                let width = self.shape(*x)[1];
                let hd = width / heads;
                let mut gx = vec![0.0; gy.len()];
                for (r, &pos) in positions.iter().enumerate() {
                    for head in 0..*heads {
                        for i in 0..hd / 2 {
                            let a = pos * kernels::rope_freq(i, hd);
                            let (s, c) = (libm::sin(a), libm::cos(a));
                            let j = r * width + head * hd + 2 * i;
                            let (g0, g1) = (gy[j], gy[j + 1]);
                            gx[j] = g0 * c + g1 * s;
                            gx[j + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                accumulate(&mut slots[x.0], &gx);
            }
            Op::SplitHeads(x, heads) => {
                let (l, w) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d = w / heads;
                let mut gx = vec![0.0; l * w];
                for r in 0..l {
                    for h in 0..*heads {
                        gx[r * w + h * d..r * w + (h + 1) * d]
                            .copy_from_slice(&gy[h * l * d + r * d..h * l * d + (r + 1) * d]);
                    }
                }
                accumulate(&mut slots[x.0], &gx);
            }
            Op::MergeHeads(x) => {
                let (h, l, d) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let w = h * d;
                let mut gx = vec![0.0; h * l * d];
                for hh in 0..h {
                    for r in 0..l {
                        gx[hh * l * d + r * d..hh * l * d + (r + 1) * d]
                            .copy_from_slice(&gy[r * w + hh * d..r * w + (hh + 1) * d]);
                    }
                }
                accumulate(&mut slots[x.0], &gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.vals(*p).len();
                    if wants(*p) {
                        accumulate(&mut slots[p.0], &gy[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows(x, start) => {
                let c = self.shape(*x)[1];
                let mut gx = vec![0.0; self.vals(*x).len()];
                gx[start * c..start * c + gy.len()].copy_from_slice(gy);
                accumulate(&mut slots[x.0], &gx);
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if wants(*p) {
                        let gp: Vec<f64> = (0..rows)
                            .flat_map(|r| gy[r * total + off..r * total + off + w].iter().copied())
                            .collect();
                        accumulate(&mut slots[p.0], &gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.shape[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&gy[i * len..(i + 1) * len]);
                }
                accumulate(&mut slots[x.0], &gx);
            }
            Op::MeanRows(x) => {
                let n = self.vals(*x).len();
                let c = gy.len();
                let rows = n / c;
                let gx: Vec<f64> = (0..n).map(|i| gy[i % c] / rows as f64).collect();
                accumulate(&mut slots[x.0], &gx);
            }
            Op::Sum(x) => {
                let gx = vec![gy[0]; self.vals(*x).len()];
                accumulate(&mut slots[x.0], &gx);
            }
            Op::Mean(x) => {
                let n = self.vals(*x).len();
                let gx = vec![gy[0] / n as f64; n];
                accumulate(&mut slots[x.0], &gx);
            }
            Op::Reshape(x) => accumulate(&mut slots[x.0], gy),
        }
    }
}
