//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! append nodes, so the insertion order is a valid topological order and
//! the tape is acyclic by construction. [`Graph::backward`] walks the tape
//! in reverse and adds the resulting leaf gradients into the graph's
//! gradient store; they keep accumulating until [`Graph::zero_grad`].

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::quant::round_half_away;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
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
    Constant,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Bmm { a: Var, b: Var, transpose_b: bool },
    Gather { a: Var, index: Arc<[usize]>, block_in: usize },
    Softmax { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
    Mse { a: Var, target: Vec<f64> },
    FakeQuant { a: Var, pass: Vec<bool> },
    PrependToken { x: Var, token: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise stabilized softmax over the trailing dimension.
pub fn softmax_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Every leaf in creation order.
    pub fn leaves(&self) -> Vec<Var> {
        self.nodes.iter().enumerate().filter(|(_, n)| matches!(n.op, Op::Leaf)).map(|(i, _)| Var(i)).collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf (or `None` if no backward reached it).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            bail!(Dimension, "matmul {:?} x {:?}", sa, sb);
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{} {:?} vs {:?}", what, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            bail!(Dimension, "broadcast {:?} onto {:?}", sb, sa);
        }
        let vb = self.value(b).data();
        let block = vb.len().max(1);
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(block) {
            for (o, &x) in chunk.iter_mut().zip(vb) {
                *o += x;
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, s }, rg)
    }

    /// Batched product `[g, m, k] · [g, k, n]`, or `[g, m, k] · [g, n, k]ᵀ` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            bail!(Dimension, "bmm {:?} x {:?}", sa, sb);
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            bail!(Dimension, "bmm inner {:?} x {:?} (transpose_b={})", sa, sb, transpose_b);
        }
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            let ab = &da[i * m * k..(i + 1) * m * k];
            let bb = &db[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt_acc(ab, bb, ob, m, n, k);
            } else {
                gemm_acc(ab, bb, ob, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[g, m, n], out)?, Op::Bmm { a, b, transpose_b }, rg))
    }

    /// Blockwise gather: `a` is split into blocks of `block_in` values and each
    /// output block is `block[index[i]]` for `i` in `index`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, block_in: usize, out_shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if block_in == 0 || src.len() % block_in != 0 {
            bail!(Dimension, "gather block {} does not divide {}", block_in, src.len());
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= block_in) {
            bail!(Index, "gather index {} >= block {}", bad, block_in);
        }
        let blocks = src.len() / block_in;
        let mut out = Vec::with_capacity(blocks * index.len());
        for b in 0..blocks {
            let base = &src[b * block_in..(b + 1) * block_in];
            out.extend(index.iter().map(|&i| base[i]));
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Gather { a, index, block_in }, rg))
    }

    /// `[b, t, d] -> [b, d]`, selecting token `token`.
    pub fn select_token(&mut self, x: Var, token: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || token >= s[1] {
            bail!(Index, "token {} of {:?}", token, s);
        }
        let d = s[2];
        let index: Arc<[usize]> = (token * d..(token + 1) * d).collect();
        self.gather(x, index, s[1] * d, &[s[0], d])
    }

    /// `[b, t, d] -> [b, t - from, d]`, dropping the first `from` tokens.
    pub fn drop_tokens(&mut self, x: Var, from: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || from >= s[1] {
            bail!(Index, "drop {} tokens of {:?}", from, s);
        }
        let index: Arc<[usize]> = (from * s[2]..s[1] * s[2]).collect();
        self.gather(x, index, s[1] * s[2], &[s[0], s[1] - from, s[2]])
    }

    /// `[b, t, h·e] -> [b·h, t, e]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            bail!(Dimension, "split {:?} into {} heads", s, heads);
        }
        let (t, d) = (s[1], s[2]);
        let e = d / heads;
        let mut index = Vec::with_capacity(t * d);
        for h in 0..heads {
            for ti in 0..t {
                for ei in 0..e {
                    index.push(ti * d + h * e + ei);
                }
            }
        }
        self.gather(x, index.into(), t * d, &[s[0] * heads, t, e])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            bail!(Dimension, "merge {:?} from {} heads", s, heads);
        }
        let (t, e) = (s[1], s[2]);
        let d = e * heads;
        let mut index = Vec::with_capacity(t * d);
        for ti in 0..t {
            for h in 0..heads {
                for ei in 0..e {
                    index.push(h * t * e + ti * e + ei);
                }
            }
        }
        self.gather(x, index.into(), t * d, &[s[0] / heads, t, d])
    }

    /// `x: [b, n, d]`, `token: [d]` -> `[b, n + 1, d]` with `token` as row 0.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(token) != [s[2]] {
            bail!(Dimension, "prepend {:?} to {:?}", self.shape(token), s);
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        let (xv, tv) = (self.value(x).data(), self.value(token).data());
        for bi in 0..b {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[bi * n * d..(bi + 1) * n * d]);
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(Tensor::new(&[b, n + 1, d], out)?, Op::PrependToken { x, token }, rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let cols = t.last_dim();
        softmax_in_place(t.data_mut(), cols);
        let rg = self.rg(a);
        self.push(t, Op::Softmax { a }, rg)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(a).last_dim();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            bail!(Dimension, "layer_norm over {:?} with gain {:?}", self.shape(a), self.shape(gain));
        }
        let x = self.value(a).data();
        let (g, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bv[j];
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { a, gain, bias, xhat, inv_std }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(t, Op::Gelu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid_scalar);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid { a }, rg)
    }

    /// Mean cross-entropy of `logits: [b, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            bail!(Dimension, "cross_entropy logits {:?} with {} labels", s, labels.len());
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            bail!(Index, "label {} out of range for {} classes", bad, c);
        }
        let (loss, probs) = cross_entropy_with_probs(self.value(logits).data(), labels, c);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        if self.shape(a) != target.shape() {
            bail!(Dimension, "mse {:?} vs {:?}", self.shape(a), target.shape());
        }
        let v = self.value(a).data();
        let s = v.iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, target: target.data().to_vec() }, rg))
    }

    /// Quantize-then-dequantize with a straight-through gradient on unclamped values.
    pub fn fake_quant(&mut self, a: Var, delta: f64, bits: u32) -> Result<Var> {
        if !(delta > 0.0) {
            bail!(Argument, "fake_quant scale must be positive, got {}", delta);
        }
        let (lo, hi) = crate::quant::code_range(bits)?;
        let v = self.value(a);
        let mut pass = Vec::with_capacity(v.len());
        let mut out = Vec::with_capacity(v.len());
        for &x in v.data() {
            let r = round_half_away(x / delta);
            let c = r.clamp(lo as f64, hi as f64);
            pass.push(r == c);
            out.push(c * delta);
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::FakeQuant { a, pass }, rg))
    }

    /// Reverse pass seeded with 1 at the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            bail!(Dimension, "backward needs a scalar, got {:?}", self.shape(loss));
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_from(loss, &seed)
    }

    /// Reverse pass from `out` with an explicit upstream gradient.
    pub fn backward_from(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.shape(out) {
            bail!(Dimension, "seed {:?} for output {:?}", seed.shape(), self.shape(out));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        g[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&gi) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(Tensor::new(self.nodes[i].value.shape(), gi)?),
                }
                continue;
            }
            self.propagate(i, &gi, &mut g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let len_of = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        // Borrow the accumulator for `v`, allocating zeros on first touch.
        fn slot<'a>(g: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            g[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = len_of(*a) / k;
                if rg(*a) {
                    let ga = slot(g, *a, m * k);
                    gemm_nt_acc(gi, val(*b), ga, m, k, n);
                }
                if rg(*b) {
                    let gb = slot(g, *b, k * n);
                    gemm_tn_acc(val(*a), gi, gb, m, k, n);
                }
            }
            Op::Add { a, b } => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if rg(v) {
                        let s = slot(g, v, gi.len());
                        s.iter_mut().zip(gi).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub { a, b } => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if rg(v) {
                        let s = slot(g, v, gi.len());
                        s.iter_mut().zip(gi).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let vb = val(*b);
                    let s = slot(g, *a, gi.len());
                    for ((x, y), w) in s.iter_mut().zip(gi).zip(vb) {
                        *x += y * w;
                    }
                }
                if rg(*b) {
                    let va = val(*a);
                    let s = slot(g, *b, gi.len());
                    for ((x, y), w) in s.iter_mut().zip(gi).zip(va) {
                        *x += y * w;
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if rg(*a) {
                    let s = slot(g, *a, gi.len());
                    s.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let nb = len_of(*b).max(1);
                    let s = slot(g, *b, nb);
                    for chunk in gi.chunks(nb) {
                        s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale { a, s: k } => {
                if rg(*a) {
                    let s = slot(g, *a, gi.len());
                    s.iter_mut().zip(gi).for_each(|(x, y)| *x += k * y);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let sa = nodes[a.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = nodes[i].value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    let ga = slot(g, *a, bs * m * k);
                    for t in 0..bs {
                        let gb = &gi[t * m * n..(t + 1) * m * n];
                        let bb = &vb[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *transpose_b {
                            gemm_acc(gb, bb, out, m, n, k);
                        } else {
                            gemm_nt_acc(gb, bb, out, m, k, n);
                        }
                    }
                }
                if rg(*b) {
                    let gbv = slot(g, *b, bs * k * n);
                    for t in 0..bs {
                        let gb = &gi[t * m * n..(t + 1) * m * n];
                        let ab = &va[t * m * k..(t + 1) * m * k];
                        let out = &mut gbv[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            gemm_tn_acc(gb, ab, out, m, n, k);
                        } else {
                            gemm_tn_acc(ab, gb, out, m, k, n);
                        }
                    }
                }
            }
            Op::Gather { a, index, block_in } => {
                if rg(*a) {
                    let n = len_of(*a);
                    let s = slot(g, *a, n);
                    let block_out = index.len();
                    for (bi, chunk) in gi.chunks(block_out.max(1)).enumerate() {
                        let base = bi * block_in;
                        for (&ix, &y) in index.iter().zip(chunk) {
                            s[base + ix] += y;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if rg(*a) {
                    let y = nodes[i].value.data();
                    let cols = nodes[i].value.last_dim();
                    let s = slot(g, *a, gi.len());
                    for ((yr, gr), sr) in y.chunks(cols).zip(gi.chunks(cols)).zip(s.chunks_mut(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &p), &q) in sr.iter_mut().zip(yr).zip(gr) {
                            *o += p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let d = nodes[a.0].value.last_dim();
                let gv = val(*gain);
                if rg(*a) {
                    let s = slot(g, *a, gi.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &gi[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xr[j];
                        }
                        let df = d as f64;
                        for j in 0..d {
                            s[r * d + j] += is / df * (df * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                }
                if rg(*gain) {
                    let s = slot(g, *gain, d);
                    for (gr, xr) in gi.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * xr[j];
                        }
                    }
                }
                if rg(*bias) {
                    let s = slot(g, *bias, d);
                    for gr in gi.chunks(d) {
                        s.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Gelu { a } => {
                if rg(*a) {
                    let x = val(*a);
                    let s = slot(g, *a, gi.len());
                    for ((o, &y), &xv) in s.iter_mut().zip(gi).zip(x) {
                        *o += y * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if rg(*a) {
                    let out = nodes[i].value.data();
                    let s = slot(g, *a, gi.len());
                    for ((o, &y), &p) in s.iter_mut().zip(gi).zip(out) {
                        *o += y * p * (1.0 - p);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if rg(*logits) {
                    let c = nodes[logits.0].value.last_dim();
                    let b = labels.len() as f64;
                    let up = gi[0];
                    let s = slot(g, *logits, probs.len());
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[r * c + j] += up * (probs[r * c + j] - onehot) / b;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if rg(*a) {
                    let s = slot(g, *a, len_of(*a));
                    s.iter_mut().for_each(|x| *x += gi[0]);
                }
            }
            Op::Mean { a } => {
                if rg(*a) {
                    let n = len_of(*a);
                    let s = slot(g, *a, n);
                    let v = gi[0] / n as f64;
                    s.iter_mut().for_each(|x| *x += v);
                }
            }
            Op::Mse { a, target } => {
                if rg(*a) {
                    let x = val(*a);
                    let n = x.len() as f64;
                    let s = slot(g, *a, x.len());
                    for ((o, &xv), &t) in s.iter_mut().zip(x).zip(target) {
                        *o += gi[0] * 2.0 * (xv - t) / n;
                    }
                }
            }
            Op::FakeQuant { a, pass } => {
                if rg(*a) {
                    let s = slot(g, *a, gi.len());
                    for ((o, &y), &p) in s.iter_mut().zip(gi).zip(pass) {
                        if p {
                            *o += y;
                        }
                    }
                }
            }
            Op::PrependToken { x, token } => {
                let sx = nodes[x.0].value.shape();
                let (b, n, d) = (sx[0], sx[1], sx[2]);
                if rg(*x) {
                    let s = slot(g, *x, b * n * d);
                    for bi in 0..b {
                        let src = &gi[(bi * (n + 1) + 1) * d..(bi + 1) * (n + 1) * d];
                        s[bi * n * d..(bi + 1) * n * d].iter_mut().zip(src).for_each(|(o, y)| *o += y);
                    }
                }
                if rg(*token) {
                    let s = slot(g, *token, d);
                    for bi in 0..b {
                        let src = &gi[bi * (n + 1) * d..(bi * (n + 1) + 1) * d];
                        s.iter_mut().zip(src).for_each(|(o, y)| *o += y);
                    }
                }
            }
        }
    }
}

/// Mean cross-entropy and the row-wise softmax probabilities.
pub fn cross_entropy_with_probs(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs, classes);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        loss += lse - row[y];
    }
    (loss / labels.len().max(1) as f64, probs)
}
