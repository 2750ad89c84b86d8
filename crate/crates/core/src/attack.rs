//! Reconstruction attack on split-layer representations, and SSIM/PSNR scoring.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::optim::Adam;
use crate::quant::QuantizedRep;
use crate::rng::{derive_seed, SaRng};
use crate::tensor::Tensor;
use crate::vit::{unpatchify_index, ModelSpec};

pub const DECODER_HIDDEN: usize = 128;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;

/// Per-token linear de-embedding to pixels, then a two-layer residual
/// refinement over the whole image and a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDecoder {
    pub spec: ModelSpec,
    /// patch weight, patch bias, refine-in weight, bias, refine-out weight, bias
    pub tensors: Vec<Tensor>,
}

fn init(rng: &mut SaRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("shape")
}

impl InverseDecoder {
    pub fn new(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = SaRng::new(seed);
        let (d, pd, px) = (spec.embed_dim, spec.patch_dim(), spec.pixels());
        let tensors = alloc::vec![
            // small enough that an untrained decoder paints a flat 0.5 image
            init(&mut rng, &[d, pd], 1e-3 / libm::sqrt(d as f64)),
            Tensor::zeros(&[pd]),
            init(&mut rng, &[px, DECODER_HIDDEN], 1.0 / libm::sqrt(px as f64)),
            Tensor::zeros(&[DECODER_HIDDEN]),
            // refinement starts as the identity around the de-embedding
            Tensor::zeros(&[DECODER_HIDDEN, px]),
            Tensor::zeros(&[px]),
        ];
        Self { spec: *spec, tensors }
    }

    fn forward_on(&self, g: &mut Graph, reps: &Tensor, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let spec = &self.spec;
        let s = reps.shape();
        if s.len() != 3 || s[1] != spec.tokens() || s[2] != spec.embed_dim {
            bail!(Dimension, "decoder input {:?}", s);
        }
        let b = s[0];
        let vars: Vec<Var> =
            self.tensors.iter().map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) }).collect();
        let x = g.constant(reps.clone());
        let patches = g.drop_tokens(x, 1)?;
        let pix = g.matmul(patches, vars[0])?;
        let pix = g.add_broadcast(pix, vars[1])?;
        let index: Arc<[usize]> = unpatchify_index(spec).into();
        let block = spec.num_patches() * spec.patch_dim();
        let x0 = g.gather(pix, index, block, &[b, spec.pixels()])?;
        let h = g.matmul(x0, vars[2])?;
        let h = g.add_broadcast(h, vars[3])?;
        let h = g.gelu(h);
        let r = g.matmul(h, vars[4])?;
        let r = g.add_broadcast(r, vars[5])?;
        let y = g.add(x0, r)?;
        Ok((g.sigmoid(y), vars))
    }

    /// Reconstructions `[b, H, W, C]` in `(0, 1)`.
    pub fn reconstruct(&self, reps: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (out, _) = self.forward_on(&mut g, reps, false)?;
        let spec = &self.spec;
        g.value(out).clone().reshape(&[reps.shape()[0], spec.image_size, spec.image_size, spec.channels])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-3, batch_size: 32, seed: 5 }
    }
}

/// Fits a decoder from representations `[n, N+1, d]` back to the images
/// `[n, H, W, C]` they came from. Returns the decoder and per-epoch mean MSE.
pub fn train_decoder(
    spec: &ModelSpec,
    reps: &Tensor,
    images: &Tensor,
    cfg: &DecoderConfig,
) -> Result<(InverseDecoder, Vec<f64>)> {
    let n = reps.shape().first().copied().unwrap_or(0);
    if n == 0 || images.shape().first() != Some(&n) || images.len() != n * spec.pixels() {
        bail!(Dimension, "decoder data: reps {:?}, images {:?}", reps.shape(), images.shape());
    }
    if cfg.batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let mut dec = InverseDecoder::new(spec, derive_seed(cfg.seed, 0));
    let mut opt = Adam::new(cfg.lr);
    let mut rng = SaRng::stream(cfg.seed, 1);
    let (per_rep, px) = (reps.len() / n, spec.pixels());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(n);
        let mut total = 0.0;
        for ids in order.chunks(cfg.batch_size) {
            let b = ids.len();
            let mut rs = Vec::with_capacity(b * per_rep);
            let mut ys = Vec::with_capacity(b * px);
            for &i in ids {
                rs.extend_from_slice(&reps.data()[i * per_rep..(i + 1) * per_rep]);
                ys.extend_from_slice(&images.data()[i * px..(i + 1) * px]);
            }
            let rs = Tensor::new(&[b, spec.tokens(), spec.embed_dim], rs)?;
            let ys = Tensor::new(&[b, px], ys)?;
            let mut g = Graph::new();
            let (out, vars) = dec.forward_on(&mut g, &rs, true)?;
            let loss = g.mse(out, &ys)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                bail!(Training, "decoder loss diverged in epoch {}", epoch);
            }
            g.backward(loss)?;
            let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();
            let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            let mut ps: Vec<&mut Tensor> = dec.tensors.iter_mut().collect();
            opt.step(&mut ps, &refs);
            total += lv * b as f64;
        }
        losses.push(total / n as f64);
    }
    Ok((dec, losses))
}

/// PSNR in dB for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        bail!(Argument, "psnr over {} vs {} pixels", a.len(), b.len());
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

/// Mean SSIM over all valid 7×7 windows of single-channel `h×w` images in
/// `[0, 1]`, with sample (co)variances inside each window.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let k = SSIM_WINDOW;
    if a.len() != h * w || b.len() != h * w {
        bail!(Argument, "ssim over {} and {} pixels for {}x{}", a.len(), b.len(), h, w);
    }
    if h < k || w < k {
        bail!(Argument, "image {}x{} smaller than the {}x{} window", h, w, k, k);
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let (p, q) = (a[y * w + x], b[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = cov_norm * (saa / np - ma * ma);
            let vb = cov_norm * (sbb / np - mb * mb);
            let cab = cov_norm * (sab / np - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackScores {
    pub ssim: f64,
    pub psnr: f64,
    /// `(ssim, psnr)` per image.
    pub per_image: Vec<(f64, f64)>,
}

/// Per-image SSIM/PSNR of reconstructions against ground truth, both `[n, H, W, C]`.
/// Channels are scored separately and averaged.
pub fn score_images(recon: &Tensor, truth: &Tensor) -> Result<AttackScores> {
    let s = truth.shape();
    if recon.shape() != s || s.len() != 4 || s[0] == 0 {
        bail!(Argument, "reconstruction {:?} vs ground truth {:?}", recon.shape(), s);
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let per = h * w * c;
    let mut per_image = Vec::with_capacity(n);
    for i in 0..n {
        let ra = &recon.data()[i * per..(i + 1) * per];
        let ta = &truth.data()[i * per..(i + 1) * per];
        let mut sv = 0.0;
        for ch in 0..c {
            let pa: Vec<f64> = ra.iter().skip(ch).step_by(c).copied().collect();
            let pb: Vec<f64> = ta.iter().skip(ch).step_by(c).copied().collect();
            sv += ssim(&pa, &pb, h, w)?;
        }
        per_image.push((sv / c as f64, psnr(ra, ta)?));
    }
    let ssim = per_image.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let psnr = per_image.iter().map(|p| p.1).sum::<f64>() / n as f64;
    Ok(AttackScores { ssim, psnr, per_image })
}

/// Decodes uploaded codes as the server receives them and scores them.
pub fn reconstruct_and_score(decoder: &InverseDecoder, uploads: &QuantizedRep, truth: &Tensor) -> Result<AttackScores> {
    if uploads.batch() != truth.shape().first().copied().unwrap_or(0) {
        bail!(Argument, "{} uploads for {:?} images", uploads.batch(), truth.shape());
    }
    let recon = decoder.reconstruct(&uploads.dequantize())?;
    score_images(&recon, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_score_perfectly() {
        let mut rng = SaRng::new(3);
        let img: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
        assert!((ssim(&img, &img, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
    }

    #[test]
    fn constant_offset_gives_twenty_db() {
        let a = [0.2; 64];
        let b = [0.3; 64];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn small_images_are_rejected() {
        assert!(ssim(&[0.0; 36], &[0.0; 36], 6, 6).is_err());
        assert!(psnr(&[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn untrained_decoder_is_flat() {
        let spec = ModelSpec::default();
        let dec = InverseDecoder::new(&spec, 1);
        let reps = Tensor::zeros(&[2, spec.tokens(), spec.embed_dim]);
        let out = dec.reconstruct(&reps).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
