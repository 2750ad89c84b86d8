//! Uniform symmetric quantization and layer-wise scale search.
//!
//! Quantization is simulated: codes and scales are what gets stored and
//! sent, while arithmetic runs in float on `code * scale`. Every quantized
//! forward (server copy, client copy, noisy client copy) goes through
//! [`fake_quant_tensor`] and [`encode_with`], so they agree bitwise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::bytes::{Reader, Writer};
use crate::error::{bail, Error, Result};
use crate::head::TaskModule;
use crate::rng::SaRng;
use crate::tensor::Tensor;
use crate::vit::{embed, encoder_layer, Backend, EmbedParams, Frontend, LayerParams, ModelSpec, LAYER_MATRIX_SLOTS};

/// `round` with ties away from zero.
pub fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}

/// Signed code range `[-2^(k-1), 2^(k-1) - 1]` for `2 <= k <= 8`.
pub fn code_range(bits: u32) -> Result<(i32, i32)> {
    if !(2..=8).contains(&bits) {
        bail!(Argument, "bit width {} outside 2..=8", bits);
    }
    Ok((-(1 << (bits - 1)), (1 << (bits - 1)) - 1))
}

/// `clamp(round(w / Δ), -2^(k-1), 2^(k-1) - 1)`.
pub fn quantize_value(w: f64, delta: f64, bits: u32) -> Result<i8> {
    if !(delta > 0.0) || !delta.is_finite() {
        bail!(Argument, "scale must be positive and finite, got {}", delta);
    }
    let (lo, hi) = code_range(bits)?;
    Ok(round_half_away(w / delta).clamp(lo as f64, hi as f64) as i8)
}

pub fn dequantize(code: i8, delta: f64) -> f64 {
    code as f64 * delta
}

/// Quantize-then-dequantize every element.
pub fn fake_quant_tensor(t: &Tensor, delta: f64, bits: u32) -> Result<Tensor> {
    let data = t
        .data()
        .iter()
        .map(|&x| quantize_value(x, delta, bits).map(|c| dequantize(c, delta)))
        .collect::<Result<_>>()?;
    Tensor::new(t.shape(), data)
}

/// The max-abs scale `max|w| / (2^(k-1) - 1)`; all-zero tensors get `1 / (2^(k-1) - 1)`.
pub fn max_abs_scale(max_abs: f64, bits: u32) -> Result<f64> {
    let (_, hi) = code_range(bits)?;
    let m = if max_abs > 0.0 && max_abs.is_finite() { max_abs } else { 1.0 };
    Ok(m / hi as f64)
}

pub const GRID_POINTS: usize = 36;

/// `β · max|w| / (2^(k-1) - 1)` for `β = 0.50, 0.52, ..., 1.20`.
pub fn candidate_grid(max_abs: f64, bits: u32) -> Result<Vec<f64>> {
    let base = max_abs_scale(max_abs, bits)?;
    Ok((0..GRID_POINTS).map(|i| (50 + 2 * i) as f64 / 100.0 * base).collect())
}

/// Mean over the leading (batch) axis of `Σ (x̂ - x)² (∂L/∂x)²`.
pub fn weighted_error(xhat: &Tensor, x: &Tensor, grad: &Tensor) -> Result<f64> {
    if xhat.shape() != x.shape() || x.shape() != grad.shape() {
        bail!(Dimension, "objective shapes {:?} {:?} {:?} differ", xhat.shape(), x.shape(), grad.shape());
    }
    let b = x.shape().first().copied().unwrap_or(0);
    if b == 0 {
        bail!(Argument, "empty calibration batch");
    }
    let s: f64 = xhat
        .data()
        .iter()
        .zip(x.data())
        .zip(grad.data())
        .map(|((a, b), g)| {
            let e = a - b;
            e * e * g * g
        })
        .sum();
    Ok(s / b as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSearch {
    pub delta: f64,
    pub objective: f64,
    /// Objective for every grid candidate, in grid order.
    pub objectives: Vec<f64>,
}

/// Evaluates every candidate and returns the minimizer; ties go to the smallest scale.
pub fn search_scale(grid: &[f64], mut objective: impl FnMut(f64) -> Result<f64>) -> Result<ScaleSearch> {
    if grid.is_empty() {
        bail!(Argument, "empty scale grid");
    }
    let mut objectives = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &delta in grid {
        let v = objective(delta)?;
        objectives.push(v);
        if v.is_nan() {
            continue;
        }
        best = match best {
            Some((bd, bv)) if bv < v || (bv == v && bd <= delta) => Some((bd, bv)),
            _ => Some((delta, v)),
        };
    }
    let Some((delta, objective)) = best else {
        bail!(Argument, "no scale candidate produced a comparable objective");
    };
    Ok(ScaleSearch { delta, objective, objectives })
}

/// Integer codes of one tensor plus its scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub scale: f64,
}

impl QuantTensor {
    pub fn quantize(t: &Tensor, scale: f64, bits: u32) -> Result<Self> {
        let codes = t.data().iter().map(|&w| quantize_value(w, scale, bits)).collect::<Result<_>>()?;
        Ok(Self { shape: t.shape().to_vec(), codes, scale })
    }

    pub fn quantize_max_abs(t: &Tensor, bits: u32) -> Result<Self> {
        Self::quantize(t, max_abs_scale(t.max_abs(), bits)?, bits)
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.codes.iter().map(|&c| dequantize(c, self.scale)).collect();
        Tensor::new(&self.shape, data).expect("codes match shape")
    }

    pub fn check_range(&self, bits: u32) -> Result<()> {
        let (lo, hi) = code_range(bits)?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            bail!(Config, "nonpositive scale {}", self.scale);
        }
        if let Some(c) = self.codes.iter().find(|&&c| (c as i32) < lo || (c as i32) > hi) {
            bail!(Config, "code {} outside {}-bit range", c, bits);
        }
        Ok(())
    }

    fn write(&self, w: &mut Writer) {
        w.u8(self.shape.len() as u8);
        for &d in &self.shape {
            w.u32(d as u32);
        }
        w.f64(self.scale);
        for &c in &self.codes {
            w.i8(c);
        }
    }

    fn read(r: &mut Reader<'_>, expect: &[usize]) -> Result<Self> {
        let at = r.offset();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != expect {
            return Err(Error::Decode { offset: at, reason: format!("tensor shape {shape:?}, expected {expect:?}") });
        }
        let scale = r.f64()?;
        let n: usize = shape.iter().product();
        let codes = r.take(n)?.iter().map(|&b| b as i8).collect();
        Ok(Self { shape, codes, scale })
    }
}

/// Embedding output `[b, N+1, d]` for float parameters.
pub fn embed_forward(spec: &ModelSpec, images: &Tensor, params: &EmbedParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = params.bind(&mut g, false);
    let x = embed(&mut g, spec, images, &e)?;
    Ok(g.value(x).clone())
}

/// One encoder layer on float parameters, optionally fake-quantizing its output.
pub fn layer_forward(spec: &ModelSpec, input: &Tensor, layer: &LayerParams, act: Option<(f64, u32)>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let lv = layer.bind(&mut g, false);
    let y = encoder_layer(&mut g, spec, x, &lv)?;
    match act {
        Some((delta, bits)) => fake_quant_tensor(g.value(y), delta, bits),
        None => Ok(g.value(y).clone()),
    }
}

/// Layer-K representation as codes with the public scale `Δ_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRep {
    /// `[b, N+1, d]`
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub scale: f64,
}

impl QuantizedRep {
    pub fn dequantize(&self) -> Tensor {
        let data = self.codes.iter().map(|&c| dequantize(c, self.scale)).collect();
        Tensor::new(&self.shape, data).expect("codes match shape")
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Codes of sample `i` (`(N+1)·d` values).
    pub fn sample(&self, i: usize) -> &[i8] {
        let n = self.codes.len() / self.shape[0];
        &self.codes[i * n..(i + 1) * n]
    }
}

/// Runs a float frontend with fake-quantized layer outputs and returns layer-K codes.
pub fn encode_with(frontend: &Frontend, act_scales: &[f64], bits: u32, images: &Tensor) -> Result<QuantizedRep> {
    if act_scales.len() != frontend.layers.len() || act_scales.is_empty() {
        bail!(Argument, "{} activation scales for {} layers", act_scales.len(), frontend.layers.len());
    }
    let spec = &frontend.spec;
    let mut x = embed_forward(spec, images, &frontend.embed)?;
    let last = frontend.layers.len() - 1;
    for (l, layer) in frontend.layers.iter().enumerate() {
        if l == last {
            x = layer_forward(spec, &x, layer, None)?;
        } else {
            x = layer_forward(spec, &x, layer, Some((act_scales[l], bits)))?;
        }
    }
    let scale = act_scales[last];
    let codes = x.data().iter().map(|&v| quantize_value(v, scale, bits)).collect::<Result<_>>()?;
    Ok(QuantizedRep { shape: x.shape().to_vec(), codes, scale })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// All twelve layer tensors in [`LayerParams::tensors`] order.
    pub tensors: Vec<QuantTensor>,
    /// Scale of this layer's output activation.
    pub act_scale: f64,
}

impl QuantizedLayer {
    pub fn dequantize(&self) -> Result<LayerParams> {
        LayerParams::from_tensors(self.tensors.iter().map(QuantTensor::dequantize).collect())
    }
}

/// One scale decision made during calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchRecord {
    /// 0 for the embedding, `l` for encoder layer `l`.
    pub stage: usize,
    /// Tensor slot searched, or `None` for the layer's output activation.
    pub slot: Option<usize>,
    pub grid: Vec<f64>,
    pub search: ScaleSearch,
}

/// Embedding tensors quantized one at a time; tensors not yet searched stay float.
pub fn search_embedding(
    spec: &ModelSpec,
    images: &Tensor,
    params: &EmbedParams,
    target: &Tensor,
    grad: &Tensor,
    bits: u32,
) -> Result<(Vec<QuantTensor>, Vec<SearchRecord>)> {
    let originals: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
    let mut current = originals.clone();
    let mut out = Vec::new();
    let mut records = Vec::new();
    for slot in 0..3 {
        let grid = candidate_grid(originals[slot].max_abs(), bits)?;
        let search = search_scale(&grid, |delta| {
            let mut trial = current.clone();
            trial[slot] = QuantTensor::quantize(&originals[slot], delta, bits)?.dequantize();
            let e = embed_from(trial);
            weighted_error(&embed_forward(spec, images, &e)?, target, grad)
        })?;
        let q = QuantTensor::quantize(&originals[slot], search.delta, bits)?;
        current[slot] = q.dequantize();
        out.push(q);
        records.push(SearchRecord { stage: 0, slot: Some(slot), grid, search });
    }
    Ok((out, records))
}

fn embed_from(mut ts: Vec<Tensor>) -> EmbedParams {
    let cls = ts.pop().expect("three tensors");
    let pos = ts.pop().expect("three tensors");
    let patch_proj = ts.pop().expect("three tensors");
    EmbedParams { patch_proj, pos, cls }
}

/// Quantizes one encoder layer. Vector tensors (biases, norms) use the max-abs
/// scale; weight matrices are searched one at a time in slot order (later
/// matrices float while earlier ones are searched); the output activation
/// scale is searched last with all weights quantized.
pub fn search_layer(
    spec: &ModelSpec,
    stage: usize,
    input: &Tensor,
    layer: &LayerParams,
    target: &Tensor,
    grad: &Tensor,
    bits: u32,
) -> Result<(QuantizedLayer, Vec<SearchRecord>)> {
    let originals: Vec<Tensor> = layer.tensors().iter().map(|t| (*t).clone()).collect();
    let mut current = originals.clone();
    let mut quant: Vec<Option<QuantTensor>> = vec![None; originals.len()];
    for (slot, t) in originals.iter().enumerate() {
        if !LAYER_MATRIX_SLOTS.contains(&slot) {
            let q = QuantTensor::quantize_max_abs(t, bits)?;
            current[slot] = q.dequantize();
            quant[slot] = Some(q);
        }
    }
    let mut records = Vec::new();
    for &slot in &LAYER_MATRIX_SLOTS {
        let grid = candidate_grid(originals[slot].max_abs(), bits)?;
        let search = search_scale(&grid, |delta| {
            let mut trial = current.clone();
            trial[slot] = QuantTensor::quantize(&originals[slot], delta, bits)?.dequantize();
            let lp = LayerParams::from_tensors(trial)?;
            weighted_error(&layer_forward(spec, input, &lp, None)?, target, grad)
        })?;
        let q = QuantTensor::quantize(&originals[slot], search.delta, bits)?;
        current[slot] = q.dequantize();
        quant[slot] = Some(q);
        records.push(SearchRecord { stage, slot: Some(slot), grid, search });
    }
    let lp = LayerParams::from_tensors(current)?;
    let pre = layer_forward(spec, input, &lp, None)?;
    let grid = candidate_grid(pre.max_abs(), bits)?;
    let search = search_scale(&grid, |delta| weighted_error(&fake_quant_tensor(&pre, delta, bits)?, target, grad))?;
    let act_scale = search.delta;
    records.push(SearchRecord { stage, slot: None, grid, search });
    let tensors = quant.into_iter().map(|q| q.expect("every slot quantized")).collect();
    Ok((QuantizedLayer { tensors, act_scale }, records))
}

/// `∂L/∂X_l` for the server loss, with `X_l` the output of layer `l` (0 = embedding).
fn loss_grad_at(
    spec: &ModelSpec,
    x: &Tensor,
    rest: &[&LayerParams],
    backend: &Backend,
    head: &TaskModule,
    labels: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let mut h = xv;
    for l in rest {
        let lv = l.bind(&mut g, false);
        h = encoder_layer(&mut g, spec, h, &lv)?;
    }
    let gain = g.constant(backend.final_gain.clone());
    let bias = g.constant(backend.final_bias.clone());
    let out = g.layer_norm(h, gain, bias, spec.layernorm_eps)?;
    let cls = g.select_token(out, 0)?;
    let (logits, _) = head.forward_on(&mut g, cls, false)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss)?;
    Ok(g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// A frontend whose weights are held as codes plus per-tensor scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFrontend {
    pub spec: ModelSpec,
    pub bits: u32,
    /// Patch projection, position encoding, class token.
    pub embed: Vec<QuantTensor>,
    pub layers: Vec<QuantizedLayer>,
}

/// Calibrates every scale of `frontend`, layer by layer from the embedding to
/// layer K. Each stage's input is the already-quantized prefix output; its
/// target and gradient weights come from the float model and the server head.
pub fn quantize_frontend(
    frontend: &Frontend,
    backend: &Backend,
    head: &TaskModule,
    images: &Tensor,
    labels: &[usize],
    bits: u32,
) -> Result<(QuantizedFrontend, Vec<SearchRecord>)> {
    let spec = frontend.spec;
    if backend.spec != spec {
        bail!(Config, "frontend and backend specs differ");
    }
    spec.validate_split(frontend.split_index())?;
    code_range(bits)?;
    let b = images.shape().first().copied().unwrap_or(0);
    if b == 0 || labels.len() != b {
        bail!(Argument, "calibration needs a nonempty batch with one label per image");
    }
    let mut targets = vec![embed_forward(&spec, images, &frontend.embed)?];
    for layer in &frontend.layers {
        let next = layer_forward(&spec, targets.last().expect("nonempty"), layer, None)?;
        targets.push(next);
    }
    let all: Vec<&LayerParams> = frontend.layers.iter().chain(&backend.layers).collect();
    let grads = (0..targets.len())
        .map(|l| loss_grad_at(&spec, &targets[l], &all[l..], backend, head, labels))
        .collect::<Result<Vec<_>>>()?;

    let (embed_q, mut records) = search_embedding(&spec, images, &frontend.embed, &targets[0], &grads[0], bits)?;
    let embed_deq = embed_from(embed_q.iter().map(QuantTensor::dequantize).collect());
    let mut x = embed_forward(&spec, images, &embed_deq)?;
    let mut layers = Vec::new();
    for (i, layer) in frontend.layers.iter().enumerate() {
        let (q, recs) = search_layer(&spec, i + 1, &x, layer, &targets[i + 1], &grads[i + 1], bits)?;
        x = layer_forward(&spec, &x, &q.dequantize()?, Some((q.act_scale, bits)))?;
        layers.push(q);
        records.extend(recs);
    }
    Ok((QuantizedFrontend { spec, bits, embed: embed_q, layers }, records))
}

pub const PACKAGE_MAGIC: &[u8; 4] = b"SAQF";
pub const PACKAGE_VERSION: u32 = 1;

impl QuantizedFrontend {
    pub fn split_index(&self) -> usize {
        self.layers.len()
    }

    /// `Δ_K`, the public scale of the split-layer output.
    pub fn output_scale(&self) -> f64 {
        self.layers.last().map_or(1.0, |l| l.act_scale)
    }

    pub fn act_scales(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.act_scale).collect()
    }

    /// Float frontend holding the dequantized weights.
    pub fn dequantized(&self) -> Result<Frontend> {
        Ok(Frontend {
            spec: self.spec,
            embed: embed_from(self.embed.iter().map(QuantTensor::dequantize).collect()),
            layers: self.layers.iter().map(QuantizedLayer::dequantize).collect::<Result<_>>()?,
        })
    }

    pub fn encode(&self, images: &Tensor) -> Result<QuantizedRep> {
        encode_with(&self.dequantized()?, &self.act_scales(), self.bits, images)
    }

    /// Dequantized layer-K output `[b, N+1, d]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encode(images)?.dequantize())
    }

    /// Shapes against the spec, code ranges and scales.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.spec.validate_split(self.split_index())?;
        let template = Frontend::template(&self.spec, self.split_index());
        let expect: Vec<&Tensor> = template.tensors();
        let ours: Vec<&QuantTensor> = self.embed.iter().chain(self.layers.iter().flat_map(|l| &l.tensors)).collect();
        if ours.len() != expect.len() {
            bail!(Config, "frontend has {} tensors, spec needs {}", ours.len(), expect.len());
        }
        for (q, t) in ours.iter().zip(&expect) {
            if q.shape != t.shape() || q.codes.len() != t.len() {
                bail!(Config, "tensor shape {:?} does not match spec {:?}", q.shape, t.shape());
            }
            q.check_range(self.bits)?;
        }
        for l in &self.layers {
            if !(l.act_scale > 0.0) || !l.act_scale.is_finite() {
                bail!(Config, "activation scale {} not positive", l.act_scale);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PACKAGE_MAGIC);
        w.u32(PACKAGE_VERSION);
        self.spec.write(&mut w);
        w.u64(self.spec.hash());
        w.u8(self.bits as u8);
        w.u32(self.layers.len() as u32);
        for t in &self.embed {
            t.write(&mut w);
        }
        for l in &self.layers {
            for t in &l.tensors {
                t.write(&mut w);
            }
            w.f64(l.act_scale);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != PACKAGE_MAGIC {
            return Err(Error::Decode { offset: 0, reason: String::from("bad frontend package magic") });
        }
        let version = r.u32()?;
        if version != PACKAGE_VERSION {
            return Err(Error::Decode { offset: 4, reason: format!("unsupported package version {version}") });
        }
        let spec = ModelSpec::read(&mut r)?;
        let at = r.offset();
        if r.u64()? != spec.hash() {
            return Err(Error::Decode { offset: at, reason: String::from("spec hash mismatch") });
        }
        let bits = r.u8()? as u32;
        let k = r.u32()? as usize;
        spec.validate()
            .and_then(|_| spec.validate_split(k))
            .and_then(|_| code_range(bits).map(|_| ()))
            .map_err(|e| r.error(format!("{e}")))?;
        let template = Frontend::template(&spec, k);
        let embed = template
            .embed
            .tensors()
            .iter()
            .map(|t| QuantTensor::read(&mut r, t.shape()))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(k);
        for lt in &template.layers {
            let tensors =
                lt.tensors().iter().map(|t| QuantTensor::read(&mut r, t.shape())).collect::<Result<Vec<_>>>()?;
            let act_scale = r.f64()?;
            layers.push(QuantizedLayer { tensors, act_scale });
        }
        r.finish()?;
        let q = Self { spec, bits, embed, layers };
        q.validate().map_err(|e| Error::Decode { offset: bytes.len(), reason: format!("{e}") })?;
        Ok(q)
    }
}

impl Frontend {
    /// Zero-initialized-shape frontend used to check tensor layouts.
    pub fn template(spec: &ModelSpec, k: usize) -> Frontend {
        let mut rng = SaRng::new(0);
        let embed = EmbedParams::init(spec, &mut rng);
        let layers = (0..k).map(|_| LayerParams::init(spec, &mut rng)).collect();
        Frontend { spec: *spec, embed, layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_value_examples() {
        assert_eq!(quantize_value(1.0, 0.5, 8).unwrap(), 2);
        assert_eq!(quantize_value(100.0, 0.5, 8).unwrap(), 127);
        assert_eq!(quantize_value(-100.0, 0.5, 8).unwrap(), -128);
        assert_eq!(quantize_value(-0.26, 0.1, 8).unwrap(), -3);
        assert_eq!(quantize_value(0.25, 0.5, 8).unwrap(), 1);
        assert_eq!(quantize_value(-0.25, 0.5, 8).unwrap(), -1);
        assert_eq!(quantize_value(9.0, 1.0, 4).unwrap(), 7);
        assert!(quantize_value(1.0, 0.0, 8).is_err());
        assert!(quantize_value(1.0, -1.0, 8).is_err());
        assert!(quantize_value(1.0, 1.0, 9).is_err());
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(2, 0.5), 1.0);
        assert_eq!(dequantize(0, 0.37), 0.0);
    }

    #[test]
    fn round_trip_within_half_step() {
        for bits in 2..=8u32 {
            let (_, hi) = code_range(bits).unwrap();
            let delta = 0.173;
            let limit = hi as f64 * delta;
            let n = 4001;
            for i in 0..n {
                let w = -limit + 2.0 * limit * i as f64 / (n - 1) as f64;
                let back = dequantize(quantize_value(w, delta, bits).unwrap(), delta);
                assert!((back - w).abs() <= delta / 2.0 + 1e-12, "bits {bits} w {w} back {back}");
            }
        }
    }

    #[test]
    fn grid_has_36_points_around_max_abs() {
        let g = candidate_grid(12.7, 8).unwrap();
        assert_eq!(g.len(), 36);
        assert!((g[0] - 0.05).abs() < 1e-12);
        assert!((g[25] - 0.1).abs() < 1e-12);
        assert!((g[35] - 0.12).abs() < 1e-12);
    }

    #[test]
    fn exactly_representable_weights_give_zero_objective() {
        // codes up to 127 at Δ* = 0.5 so max|w| = 63.5 and β = 1 hits Δ* exactly
        let mut rng = SaRng::new(3);
        let mut data: Vec<f64> = (0..63).map(|_| (rng.below(255) as f64 - 127.0) * 0.5).collect();
        data.push(63.5);
        let w = Tensor::new(&[64], data).unwrap();
        let grad = Tensor::full(&[1, 64], 1.0);
        let target = w.clone().reshape(&[1, 64]).unwrap();
        let grid = candidate_grid(w.max_abs(), 8).unwrap();
        let s = search_scale(&grid, |d| {
            let q = fake_quant_tensor(&w, d, 8)?.reshape(&[1, 64])?;
            weighted_error(&q, &target, &grad)
        })
        .unwrap();
        assert_eq!(s.delta, 0.5);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn zero_gradient_ties_pick_smallest_scale() {
        let grid = [0.3, 0.1, 0.2];
        let s = search_scale(&grid, |_| Ok(0.0)).unwrap();
        assert_eq!(s.delta, 0.1);
        assert!(search_scale(&[], |_| Ok(0.0)).is_err());
        let x = Tensor::zeros(&[0, 3]);
        assert!(weighted_error(&x, &x, &x).is_err());
    }

    #[test]
    fn fake_quant_matches_graph_op() {
        let mut rng = SaRng::new(9);
        let t = Tensor::new(&[50], (0..50).map(|_| rng.gaussian(0.0, 3.0)).collect()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let q = g.fake_quant(v, 0.07, 6).unwrap();
        assert_eq!(g.value(q), &fake_quant_tensor(&t, 0.07, 6).unwrap());
    }
}
