//! A small post-LN vision transformer and its frontend/backend split.
//!
//! Every forward path runs on a [`Graph`], so the float model, the
//! quantized frontend and the trainable backend share one code path. A
//! frontend followed by a backend therefore performs exactly the same
//! floating-point operations as the unsplit model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::bytes::{Reader, Writer};
use crate::error::{bail, Error, Result};
use crate::rng::SaRng;
use crate::tensor::Tensor;

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_layers: usize,
    pub layernorm_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            num_heads: 4,
            mlp_hidden: 64,
            num_layers: 6,
            layernorm_eps: 1e-6,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Config, "patch size {} must divide image size {}", self.patch_size, self.image_size);
        }
        if self.image_size / self.patch_size == 0 {
            bail!(Config, "image must contain at least one patch");
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            bail!(Config, "embed dim {} not divisible by {} heads", self.embed_dim, self.num_heads);
        }
        if self.num_layers < 3 {
            bail!(Config, "need at least 3 layers, got {}", self.num_layers);
        }
        if self.channels == 0 || self.mlp_hidden == 0 {
            bail!(Config, "channels and mlp_hidden must be positive");
        }
        if !(self.layernorm_eps >= 0.0) {
            bail!(Config, "layernorm eps must be nonnegative");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Valid split points satisfy `L/2 < k < L`.
    pub fn validate_split(&self, k: usize) -> Result<()> {
        if 2 * k <= self.num_layers || k >= self.num_layers {
            bail!(Config, "split index {} must satisfy {}/2 < K < {}", k, self.num_layers, self.num_layers);
        }
        Ok(())
    }

    pub fn write(&self, w: &mut Writer) {
        for v in [
            self.image_size,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.num_heads,
            self.mlp_hidden,
            self.num_layers,
        ] {
            w.u32(v as u32);
        }
        w.f64(self.layernorm_eps);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let mut f = [0usize; 7];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let spec = Self {
            image_size: f[0],
            channels: f[1],
            patch_size: f[2],
            embed_dim: f[3],
            num_heads: f[4],
            mlp_hidden: f[5],
            num_layers: f[6],
            layernorm_eps: r.f64()?,
        };
        spec.validate().map_err(|e| Error::Decode { offset: at, reason: format!("{e}") })?;
        Ok(spec)
    }

    /// FNV-1a over the serialized form; binds packages to an architecture.
    pub fn hash(&self) -> u64 {
        let mut w = Writer::new();
        self.write(&mut w);
        fnv1a(&w.finish())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn trunc_normal(rng: &mut SaRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    /// `[P²·C, d]`
    pub patch_proj: Tensor,
    /// `[N + 1, d]`
    pub pos: Tensor,
    /// `[d]`
    pub cls: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Names of [`LayerParams`] fields in declaration order.
pub const LAYER_TENSOR_NAMES: [&str; 12] =
    ["wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain", "ln2_bias"];

/// Which layer tensors are weight matrices (searched scales); the rest are vectors.
pub const LAYER_MATRIX_SLOTS: [usize; 6] = [0, 1, 2, 3, 6, 8];

impl EmbedParams {
    pub fn init(spec: &ModelSpec, rng: &mut SaRng) -> Self {
        Self {
            patch_proj: trunc_normal(rng, &[spec.patch_dim(), spec.embed_dim], INIT_STD),
            pos: trunc_normal(rng, &[spec.tokens(), spec.embed_dim], INIT_STD),
            cls: trunc_normal(rng, &[spec.embed_dim], INIT_STD),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.patch_proj, &self.pos, &self.cls]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.patch_proj, &mut self.pos, &mut self.cls]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EmbedVars {
        let [p, q, c] = self.tensors().map(|t| bind(g, t, trainable));
        EmbedVars { patch_proj: p, pos: q, cls: c }
    }
}

impl LayerParams {
    pub fn init(spec: &ModelSpec, rng: &mut SaRng) -> Self {
        let d = spec.embed_dim;
        let h = spec.mlp_hidden;
        Self {
            wq: trunc_normal(rng, &[d, d], INIT_STD),
            wk: trunc_normal(rng, &[d, d], INIT_STD),
            wv: trunc_normal(rng, &[d, d], INIT_STD),
            wo: trunc_normal(rng, &[d, d], INIT_STD),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w1: trunc_normal(rng, &[d, h], INIT_STD),
            b1: Tensor::zeros(&[h]),
            w2: trunc_normal(rng, &[h, d], INIT_STD),
            b2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    pub fn from_tensors(mut ts: Vec<Tensor>) -> Result<Self> {
        if ts.len() != 12 {
            bail!(Argument, "layer needs 12 tensors, got {}", ts.len());
        }
        let mut it = ts.drain(..);
        let mut next = || it.next().unwrap();
        Ok(Self {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln1_gain: next(),
            ln1_bias: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln2_gain: next(),
            ln2_bias: next(),
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LayerVars {
        let v = self.tensors().map(|t| bind(g, t, trainable));
        LayerVars {
            wq: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
            ln1_gain: v[4],
            ln1_bias: v[5],
            w1: v[6],
            b1: v[7],
            w2: v[8],
            b2: v[9],
            ln2_gain: v[10],
            ln2_bias: v[11],
        }
    }
}

fn bind(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.leaf(t.clone())
    } else {
        g.constant(t.clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedVars {
    pub patch_proj: Var,
    pub pos: Var,
    pub cls: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl LayerVars {
    pub fn all(&self) -> [Var; 12] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln1_gain,
            self.ln1_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Full model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VitParams {
    pub embed: EmbedParams,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl VitParams {
    pub fn init(spec: &ModelSpec, rng: &mut SaRng) -> Result<Self> {
        spec.validate()?;
        let embed = EmbedParams::init(spec, rng);
        let layers = (0..spec.num_layers).map(|_| LayerParams::init(spec, rng)).collect();
        Ok(Self {
            embed,
            layers,
            final_gain: Tensor::full(&[spec.embed_dim], 1.0),
            final_bias: Tensor::zeros(&[spec.embed_dim]),
        })
    }

    /// Every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.embed.tensors().into();
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.final_gain);
        v.push(&self.final_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.embed.tensors_mut().into();
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.final_gain);
        v.push(&mut self.final_bias);
        v
    }

    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        let mut rng = SaRng::new(0);
        let reference = Self::init(spec, &mut rng)?;
        let ours = self.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() {
            bail!(Config, "expected {} tensors, found {}", theirs.len(), ours.len());
        }
        for (i, (a, b)) in ours.iter().zip(&theirs).enumerate() {
            if a.shape() != b.shape() {
                bail!(Config, "tensor {} has shape {:?}, expected {:?}", i, a.shape(), b.shape());
            }
        }
        Ok(())
    }
}

/// The model split at layer `k` into a frontend (embedding + layers `1..=k`)
/// and a backend (layers `k+1..=L` + final layer norm).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub frontend: Frontend,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    pub spec: ModelSpec,
    pub embed: EmbedParams,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backend {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl Frontend {
    pub fn split_index(&self) -> usize {
        self.layers.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.embed.tensors().into();
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.embed.tensors_mut().into();
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v
    }

    /// Float forward: images `[b, H, W, C]` to layer-K output `[b, N+1, d]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = self.forward_on(&mut g, images, false)?;
        Ok(g.value(x).clone())
    }

    pub fn forward_on(&self, g: &mut Graph, images: &Tensor, trainable: bool) -> Result<Var> {
        let e = self.embed.bind(g, trainable);
        let mut x = embed(g, &self.spec, images, &e)?;
        for l in &self.layers {
            let lv = l.bind(g, trainable);
            x = encoder_layer(g, &self.spec, x, &lv)?;
        }
        Ok(x)
    }
}

impl Backend {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.final_gain);
        v.push(&self.final_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.final_gain);
        v.push(&mut self.final_bias);
        v
    }

    /// Runs layers `K+1..=L` and the final norm on `x: [b, N+1, d]`.
    pub fn forward_on(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<BackendVars> {
        let mut params = Vec::new();
        let mut h = x;
        for l in &self.layers {
            let lv = l.bind(g, trainable);
            params.extend(lv.all());
            h = encoder_layer(g, &self.spec, h, &lv)?;
        }
        let gain = bind(g, &self.final_gain, trainable);
        let bias = bind(g, &self.final_bias, trainable);
        params.push(gain);
        params.push(bias);
        let out = g.layer_norm(h, gain, bias, self.spec.layernorm_eps)?;
        Ok(BackendVars { out, params })
    }

    pub fn forward(&self, rep: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(rep.clone());
        let out = self.forward_on(&mut g, x, false)?.out;
        Ok(g.value(out).clone())
    }
}

/// Backend output plus the bound parameter handles, in [`Backend::tensors`] order.
#[derive(Debug, Clone)]
pub struct BackendVars {
    pub out: Var,
    pub params: Vec<Var>,
}

impl VitParams {
    pub fn split(&self, spec: &ModelSpec, k: usize) -> Result<SplitModel> {
        spec.validate()?;
        spec.validate_split(k)?;
        if self.layers.len() != spec.num_layers {
            bail!(Config, "model has {} layers, spec says {}", self.layers.len(), spec.num_layers);
        }
        Ok(SplitModel {
            frontend: Frontend { spec: *spec, embed: self.embed.clone(), layers: self.layers[..k].to_vec() },
            backend: Backend {
                spec: *spec,
                layers: self.layers[k..].to_vec(),
                final_gain: self.final_gain.clone(),
                final_bias: self.final_bias.clone(),
            },
        })
    }

    /// Unsplit forward to the final normalized sequence `[b, N+1, d]`.
    pub fn forward(&self, spec: &ModelSpec, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_on(&mut g, spec, images, false)?;
        Ok(g.value(out.out).clone())
    }

    pub fn forward_on(&self, g: &mut Graph, spec: &ModelSpec, images: &Tensor, trainable: bool) -> Result<FullVars> {
        let e = self.embed.bind(g, trainable);
        let mut params: Vec<Var> = vec![e.patch_proj, e.pos, e.cls];
        let mut x = embed(g, spec, images, &e)?;
        let mut layer_outputs = vec![x];
        for l in &self.layers {
            let lv = l.bind(g, trainable);
            params.extend(lv.all());
            x = encoder_layer(g, spec, x, &lv)?;
            layer_outputs.push(x);
        }
        let gain = bind(g, &self.final_gain, trainable);
        let bias = bind(g, &self.final_bias, trainable);
        params.push(gain);
        params.push(bias);
        let out = g.layer_norm(x, gain, bias, spec.layernorm_eps)?;
        Ok(FullVars { out, layer_outputs, params })
    }
}

#[derive(Debug, Clone)]
pub struct FullVars {
    pub out: Var,
    /// Embedding output followed by each encoder layer's output.
    pub layer_outputs: Vec<Var>,
    /// Parameter handles in [`VitParams::tensors`] order.
    pub params: Vec<Var>,
}

/// Cuts `[b, H, W, C]` images into `[b, N, P²·C]` patches, row-major over the grid.
pub fn patchify(spec: &ModelSpec, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    let (hw, c, p) = (spec.image_size, spec.channels, spec.patch_size);
    if s.len() != 4 || s[1] != hw || s[2] != hw || s[3] != c {
        bail!(Dimension, "images {:?} do not match spec {}x{}x{}", s, hw, hw, c);
    }
    let b = s[0];
    let grid = spec.grid();
    let pd = spec.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * spec.num_patches() * pd);
    for bi in 0..b {
        let img = &src[bi * hw * hw * c..(bi + 1) * hw * hw * c];
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..p {
                    let y = gy * p + py;
                    let start = (y * hw + gx * p) * c;
                    out.extend_from_slice(&img[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(&[b, spec.num_patches(), pd], out)
}

/// Inverse of [`patchify`] for a single `[N, P²·C]` block, as a gather index
/// mapping each pixel (row-major `H, W, C`) to its position in the patch block.
pub fn unpatchify_index(spec: &ModelSpec) -> Vec<usize> {
    let (hw, c, p) = (spec.image_size, spec.channels, spec.patch_size);
    let grid = spec.grid();
    let pd = spec.patch_dim();
    let mut index = vec![0; hw * hw * c];
    for y in 0..hw {
        for x in 0..hw {
            for ch in 0..c {
                let patch = (y / p) * grid + x / p;
                let within = ((y % p) * p + x % p) * c + ch;
                index[(y * hw + x) * c + ch] = patch * pd + within;
            }
        }
    }
    index
}

/// Patch embedding with class token and position encoding: `[b, N+1, d]`.
pub fn embed(g: &mut Graph, spec: &ModelSpec, images: &Tensor, e: &EmbedVars) -> Result<Var> {
    let patches = g.constant(patchify(spec, images)?);
    let proj = g.matmul(patches, e.patch_proj)?;
    let with_cls = g.prepend_token(proj, e.cls)?;
    g.add_broadcast(with_cls, e.pos)
}

/// Multi-head self-attention with per-head scaling `1/√(d/h)`.
pub fn attention(g: &mut Graph, spec: &ModelSpec, x: Var, l: &LayerVars) -> Result<Var> {
    let h = spec.num_heads;
    let q = g.matmul(x, l.wq)?;
    let k = g.matmul(x, l.wk)?;
    let v = g.matmul(x, l.wv)?;
    let (q, k, v) = (g.split_heads(q, h)?, g.split_heads(k, h)?, g.split_heads(v, h)?);
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(spec.head_dim() as f64));
    let attn = g.softmax_rows(scores);
    let ctx = g.bmm(attn, v, false)?;
    let ctx = g.merge_heads(ctx, h)?;
    g.matmul(ctx, l.wo)
}

/// `Z = LN(X + MSA(X))`, `X' = LN(Z + MLP(Z))`.
pub fn encoder_layer(g: &mut Graph, spec: &ModelSpec, x: Var, l: &LayerVars) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] < 2 || s[2] != spec.embed_dim {
        bail!(Dimension, "encoder input {:?} needs [b, N+1 >= 2, {}]", s, spec.embed_dim);
    }
    let eps = spec.layernorm_eps;
    let msa = attention(g, spec, x, l)?;
    let r1 = g.add(x, msa)?;
    let z = g.layer_norm(r1, l.ln1_gain, l.ln1_bias, eps)?;
    let h = g.matmul(z, l.w1)?;
    let h = g.add_broadcast(h, l.b1)?;
    let h = g.gelu(h);
    let m = g.matmul(h, l.w2)?;
    let m = g.add_broadcast(m, l.b2)?;
    let r2 = g.add(z, m)?;
    g.layer_norm(r2, l.ln2_gain, l.ln2_bias, eps)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAVT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor_data(w: &mut Writer, t: &Tensor) {
    w.f64s(t.data());
}

pub(crate) fn write_shaped(w: &mut Writer, t: &Tensor) {
    w.u32(t.rank() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f64s(t.data());
}

pub(crate) fn read_shaped(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(r.error(format!("tensor rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("tensor size overflow"))?;
    let data = r.f64s(n)?;
    Tensor::new(&shape, data)
}

/// Serialized model plus any number of extra shaped tensors (task heads).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: VitParams,
    pub extras: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        self.spec.write(&mut w);
        for t in self.params.tensors() {
            write_tensor_data(&mut w, t);
        }
        w.u32(self.extras.len() as u32);
        for t in &self.extras {
            write_shaped(&mut w, t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Decode { offset: 0, reason: String::from("bad checkpoint magic") });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Decode { offset: 4, reason: format!("unsupported checkpoint version {version}") });
        }
        let spec = ModelSpec::read(&mut r)?;
        let mut template = VitParams::init(&spec, &mut SaRng::new(0))?;
        for t in template.tensors_mut() {
            let data = r.f64s(t.len())?;
            t.data_mut().copy_from_slice(&data);
        }
        let n = r.u32()? as usize;
        let mut extras = Vec::new();
        for _ in 0..n {
            extras.push(read_shaped(&mut r)?);
        }
        r.finish()?;
        Ok(Self { spec, params: template, extras })
    }
}
