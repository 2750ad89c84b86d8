//! Client side: bi-level noise, representation extraction, patch retrieval
//! augmentation and the label-side loss.

use alloc::vec::Vec;

use crate::autograd::cross_entropy_with_probs;
use crate::error::{bail, Result};
use crate::quant::{code_range, encode_with, round_half_away, QuantizedFrontend, QuantizedRep};
use crate::rng::SaRng;
use crate::tensor::Tensor;
use crate::vit::Frontend;

/// A quantized frontend whose dequantized parameters carry client-seeded noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyFrontend {
    pub base: QuantizedFrontend,
    pub alpha: f64,
    /// Perturbed float parameters; activation scales stay those of `base`.
    pub perturbed: Frontend,
}

/// `θ' = n× θ + n+` with `n× ~ N(1, α|θ|)` and `n+ ~ N(0, α|θ|)`, drawn per parameter.
pub fn perturb_value(theta: f64, alpha: f64, rng: &mut SaRng) -> f64 {
    let s = alpha * theta.abs();
    let mul = rng.gaussian(1.0, s);
    let add = rng.gaussian(0.0, s);
    mul * theta + add
}

pub fn perturb_frontend(base: &QuantizedFrontend, alpha: f64, seed: u64) -> Result<NoisyFrontend> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        bail!(Argument, "noise degree {} must be nonnegative", alpha);
    }
    let mut perturbed = base.dequantized()?;
    if alpha > 0.0 {
        let mut rng = SaRng::new(seed);
        for t in perturbed.tensors_mut() {
            for v in t.data_mut() {
                *v = perturb_value(*v, alpha, &mut rng);
            }
        }
    }
    Ok(NoisyFrontend { base: base.clone(), alpha, perturbed })
}

impl NoisyFrontend {
    /// Layer-K codes with the base frontend's public scale.
    pub fn extract(&self, images: &Tensor) -> Result<QuantizedRep> {
        encode_with(&self.perturbed, &self.base.act_scales(), self.base.bits, images)
    }
}

/// Extraction in fixed-size chunks, concatenated in sample order.
pub fn extract_representations(frontend: &NoisyFrontend, images: &Tensor) -> Result<QuantizedRep> {
    let b = images.shape().first().copied().unwrap_or(0);
    let per = images.len() / b.max(1);
    let mut parts: Vec<QuantizedRep> = Vec::new();
    let mut start = 0;
    while start < b {
        let end = (start + 64).min(b);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
        parts.push(frontend.extract(&chunk)?);
        start = end;
    }
    concat_reps(&parts)
}

pub fn concat_reps(parts: &[QuantizedRep]) -> Result<QuantizedRep> {
    let Some(first) = parts.first() else {
        bail!(Argument, "no representations to concatenate");
    };
    let mut shape = first.shape.clone();
    shape[0] = 0;
    let mut codes = Vec::new();
    for p in parts {
        if p.shape[1..] != first.shape[1..] || p.scale != first.scale {
            bail!(Dimension, "representation chunks disagree in shape or scale");
        }
        shape[0] += p.shape[0];
        codes.extend_from_slice(&p.codes);
    }
    Ok(QuantizedRep { shape, codes, scale: first.scale })
}

/// Per-token retrieval sets: row `j` of every client representation.
///
/// Rows are kept as dequantized floats (the pre-Laplace representation); since
/// every row shares `Δ_K`, a retrieved row is always `code · Δ_K` for some code.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSets {
    reps: QuantizedRep,
    rows: Vec<f64>,
    norms: Vec<f64>,
}

impl RetrievalSets {
    pub fn build(reps: &QuantizedRep) -> Result<Self> {
        if reps.shape.len() != 3 || reps.shape[1] < 2 {
            bail!(Dimension, "representations {:?} need [n, N+1, d]", reps.shape);
        }
        let rows = reps.dequantize().into_data();
        let d = reps.shape[2];
        let norms = rows.chunks(d).map(|r| libm::sqrt(r.iter().map(|v| v * v).sum())).collect();
        Ok(Self { reps: reps.clone(), rows, norms })
    }

    pub fn samples(&self) -> usize {
        self.reps.shape[0]
    }

    /// Patch count N (token rows minus the class token).
    pub fn patches(&self) -> usize {
        self.reps.shape[1] - 1
    }

    fn dim(&self) -> usize {
        self.reps.shape[2]
    }

    fn row(&self, sample: usize, token: usize) -> &[f64] {
        let (t, d) = (self.reps.shape[1], self.dim());
        &self.rows[(sample * t + token) * d..(sample * t + token + 1) * d]
    }

    fn norm(&self, sample: usize, token: usize) -> f64 {
        self.norms[sample * self.reps.shape[1] + token]
    }

    /// Cosine similarity; any zero-norm side compares as `-∞`.
    pub fn cosine(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let (na, nb) = (self.norm(a.0, a.1), self.norm(b.0, b.1));
        if na == 0.0 || nb == 0.0 {
            return f64::NEG_INFINITY;
        }
        let dot: f64 = self.row(a.0, a.1).iter().zip(self.row(b.0, b.1)).map(|(x, y)| x * y).sum();
        dot / (na * nb)
    }

    /// Sample whose row at `token` is cosine-nearest to `query`'s, excluding `query`
    /// itself; ties and the all-zero case go to the lowest sample index.
    pub fn nearest(&self, query: usize, token: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for s in 0..self.samples() {
            if s == query {
                continue;
            }
            let c = self.cosine((query, token), (s, token));
            match best {
                Some((_, bc)) if c <= bc => {}
                _ => best = Some((s, c)),
            }
        }
        best.map(|(s, _)| s)
    }

    pub fn sample_codes(&self, i: usize) -> &[i8] {
        self.reps.sample(i)
    }
}

/// Replaces `n_p` distinct random patch rows of sample `i` with their nearest
/// neighbours; the class-token row is never touched.
pub fn patch_retrieval_augment(i: usize, sets: &RetrievalSets, n_p: usize, rng: &mut SaRng) -> Result<Vec<i8>> {
    let n = sets.patches();
    if n_p > n {
        bail!(Argument, "cannot replace {} of {} patches", n_p, n);
    }
    if i >= sets.samples() {
        bail!(Index, "sample {} of {}", i, sets.samples());
    }
    let d = sets.dim();
    let mut out = sets.sample_codes(i).to_vec();
    for p in rng.choose_distinct(n, n_p) {
        let token = p + 1;
        if let Some(s) = sets.nearest(i, token) {
            let src = &sets.sample_codes(s)[token * d..(token + 1) * d];
            out[token * d..(token + 1) * d].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Index 0 holds the originals; index `j >= 1` one augmentation pass over all samples.
pub fn run_augmentation(reps: &QuantizedRep, n_aug: usize, n_p: usize, seed: u64) -> Result<Vec<QuantizedRep>> {
    let sets = RetrievalSets::build(reps)?;
    let mut rng = SaRng::new(seed);
    let mut out = alloc::vec![reps.clone()];
    for _ in 0..n_aug {
        let mut codes = Vec::with_capacity(reps.codes.len());
        for i in 0..reps.batch() {
            codes.extend(patch_retrieval_augment(i, &sets, n_p, &mut rng)?);
        }
        out.push(QuantizedRep { shape: reps.shape.clone(), codes, scale: reps.scale });
    }
    Ok(out)
}

/// Adds Laplace(0, b) in code units, rounds half away from zero and clamps to the 8-bit range.
pub fn add_laplace_noise(codes: &mut [i8], b: f64, rng: &mut SaRng) -> Result<()> {
    if !(b >= 0.0) || !b.is_finite() {
        bail!(Argument, "Laplace scale {} must be nonnegative", b);
    }
    if b == 0.0 {
        return Ok(());
    }
    let (lo, hi) = code_range(8)?;
    for c in codes {
        *c = round_half_away(*c as f64 + rng.laplace(b)).clamp(lo as f64, hi as f64) as i8;
    }
    Ok(())
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / B` with respect to the logits.
pub fn client_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        bail!(Protocol, "{} labels for logits {:?}", labels.len(), logits.shape());
    }
    let c = logits.shape()[1];
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        bail!(Argument, "label {} outside {} classes", y, c);
    }
    let (loss, mut probs) = cross_entropy_with_probs(logits.data(), labels, c);
    let inv = 1.0 / labels.len() as f64;
    for (r, &y) in labels.iter().enumerate() {
        probs[r * c + y] -= 1.0;
    }
    for p in &mut probs {
        *p *= inv;
    }
    Ok((loss, Tensor::new(logits.shape(), probs)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    /// α, degree of the parameter noise.
    pub alpha: f64,
    /// Laplace scale in code units.
    pub laplace: f64,
    /// N^P, patches replaced per augmentation.
    pub n_p: usize,
    /// N^Aug, augmentation passes.
    pub n_aug: usize,
    pub use_pr: bool,
    pub seed: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { alpha: 0.01, laplace: 0.8, n_p: 5, n_aug: 16, use_pr: true, seed: 1 }
    }
}

/// The client's share of a session: its noisy frontend and the prepared uploads.
#[derive(Debug, Clone)]
pub struct ClientUploads {
    pub noisy: NoisyFrontend,
    /// Training representations, index `j` = augmentation run, Laplace noise applied.
    pub train: Vec<QuantizedRep>,
    /// Test representations through the noisy frontend, Laplace noise applied.
    pub test_noisy: QuantizedRep,
    /// Test representations through the noiseless frontend.
    pub test_clean: QuantizedRep,
}

/// Model noise, extraction, augmentation and representation noise, each from
/// its own stream of the client seed.
pub fn prepare_uploads(
    package: &QuantizedFrontend,
    cfg: &ClientConfig,
    train_images: &Tensor,
    test_images: &Tensor,
) -> Result<ClientUploads> {
    let noisy = perturb_frontend(package, cfg.alpha, crate::rng::derive_seed(cfg.seed, 0))?;
    let raw = extract_representations(&noisy, train_images)?;
    let n_aug = if cfg.use_pr { cfg.n_aug } else { 0 };
    let mut train = run_augmentation(&raw, n_aug, cfg.n_p, crate::rng::derive_seed(cfg.seed, 1))?;
    let mut noise = SaRng::stream(cfg.seed, 2);
    for rep in &mut train {
        add_laplace_noise(&mut rep.codes, cfg.laplace, &mut noise)?;
    }
    let mut test_noisy = extract_representations(&noisy, test_images)?;
    add_laplace_noise(&mut test_noisy.codes, cfg.laplace, &mut noise)?;
    let clean = perturb_frontend(package, 0.0, 0)?;
    let test_clean = extract_representations(&clean, test_images)?;
    Ok(ClientUploads { noisy, train, test_noisy, test_clean })
}
