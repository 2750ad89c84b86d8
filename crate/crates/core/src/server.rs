//! Server-side preparation: pretraining, the merged OOD set, subset-calibrated
//! quantized frontends and quantization-aware backend tuning.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::head::{accuracy, TaskModule};
use crate::optim::Adam;
use crate::quant::{quantize_frontend, QuantizedFrontend};
use crate::rng::{derive_seed, SaRng};
use crate::spectral::ht_augment;
use crate::tensor::Tensor;
use crate::vit::{Backend, Frontend, ModelSpec, SplitModel, VitParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate {} invalid", self.lr);
        }
        Ok(())
    }
}

/// Defaults used to pretrain the server model.
pub const PRETRAIN: TrainConfig = TrainConfig { epochs: 30, batch_size: 32, lr: 1e-3, seed: 7 };

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        bail!(Training, "{} loss became non-finite ({})", what, loss);
    }
    Ok(())
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Trains the full model and a linear server head on `data` with Adam.
pub fn pretrain_server_model(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(VitParams, TaskModule)> {
    cfg.check()?;
    if data.is_empty() {
        bail!(Argument, "server dataset is empty");
    }
    let mut params = VitParams::init(spec, &mut SaRng::stream(cfg.seed, 0))?;
    let mut head = TaskModule::linear(spec.embed_dim, data.num_classes, derive_seed(cfg.seed, 1));
    let mut order_rng = SaRng::stream(cfg.seed, 2);
    let mut opt = Adam::new(cfg.lr);
    for _ in 0..cfg.epochs {
        let order = order_rng.permutation(data.len());
        for idx in batches(&order, cfg.batch_size) {
            let images = data.batch(idx);
            let labels = data.labels_usize(idx);
            let mut g = Graph::new();
            let full = params.forward_on(&mut g, spec, &images, true)?;
            let cls = g.select_token(full.out, 0)?;
            let (logits, head_vars) = head.forward_on(&mut g, cls, true)?;
            let loss = g.cross_entropy(logits, &labels)?;
            check_finite(g.value(loss).item(), "pretraining")?;
            g.backward(loss)?;
            let grads: Vec<Option<Tensor>> =
                full.params.iter().chain(&head_vars).map(|&v| g.grad(v).cloned()).collect();
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            let mut ps = params.tensors_mut();
            ps.extend(head.tensors_mut());
            opt.step(&mut ps, &grad_refs);
        }
    }
    Ok((params, head))
}

/// Logits of the unsplit float model.
pub fn model_logits(spec: &ModelSpec, params: &VitParams, head: &TaskModule, images: &Tensor) -> Result<Tensor> {
    let out = params.forward(spec, images)?;
    head.logits(&cls_rows(&out))
}

/// Row 0 of every sample of a `[b, N+1, d]` sequence, as `[b, d]`.
pub fn cls_rows(seq: &Tensor) -> Tensor {
    let s = seq.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(b * d);
    for i in 0..b {
        data.extend_from_slice(&seq.data()[i * t * d..i * t * d + d]);
    }
    Tensor::new(&[b, d], data).expect("shape")
}

/// Accuracy of `logits_of` over `data` in fixed-size chunks.
pub fn dataset_accuracy(data: &Dataset, mut logits_of: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0.0;
    for chunk in idx.chunks(100) {
        let logits = logits_of(&data.batch(chunk))?;
        correct += accuracy(&logits, &data.labels_usize(chunk)) * chunk.len() as f64;
    }
    Ok(if data.is_empty() { 0.0 } else { correct / data.len() as f64 })
}

/// `D ∪ HT(D)`: every original followed by one augmented copy per sample, same labels.
pub fn build_merged_dataset(data: &Dataset) -> Result<Dataset> {
    let mut merged = data.clone();
    for i in 0..data.len() {
        let aug = ht_augment(data.image(i), data.height, data.width, data.channels)?;
        merged.push(&aug, data.labels[i])?;
    }
    Ok(merged)
}

/// Disjoint random partition of `0..n` into `m` parts whose sizes differ by at most one.
pub fn partition(n: usize, m: usize, rng: &mut SaRng) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        bail!(Config, "need at least one subset");
    }
    let perm = rng.permutation(n);
    Ok((0..m).map(|i| perm[i * n / m..(i + 1) * n / m].to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u32,
    /// M, the number of disjoint calibration subsets.
    pub subsets: usize,
    pub calib_samples: usize,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { bits: 8, subsets: 3, calib_samples: 32, seed: 11 }
    }
}

fn calibrate(
    split: &SplitModel,
    head: &TaskModule,
    data: &Dataset,
    pool: &[usize],
    cfg: &QuantConfig,
    rng: &mut SaRng,
) -> Result<QuantizedFrontend> {
    if pool.len() < cfg.calib_samples || cfg.calib_samples == 0 {
        bail!(Config, "calibration draw of {} from a set of {}", cfg.calib_samples, pool.len());
    }
    let idx: Vec<usize> = rng.choose_distinct(pool.len(), cfg.calib_samples).into_iter().map(|i| pool[i]).collect();
    let (q, _) = quantize_frontend(
        &split.frontend,
        &split.backend,
        head,
        &data.batch(&idx),
        &data.labels_usize(&idx),
        cfg.bits,
    )?;
    Ok(q)
}

/// Index 0 is calibrated on the whole merged set, indices `1..=M` on the disjoint subsets.
pub fn build_subset_frontends(
    split: &SplitModel,
    head: &TaskModule,
    merged: &Dataset,
    cfg: &QuantConfig,
) -> Result<Vec<QuantizedFrontend>> {
    let mut rng = SaRng::stream(cfg.seed, 0);
    let parts = partition(merged.len(), cfg.subsets, &mut rng)?;
    let all: Vec<usize> = (0..merged.len()).collect();
    let mut out = vec![calibrate(split, head, merged, &all, cfg, &mut rng)?];
    for part in &parts {
        out.push(calibrate(split, head, merged, part, cfg, &mut rng)?);
    }
    Ok(out)
}

/// `λ X̃ + (1 - λ) X`, elementwise.
pub fn mixup_representation(dequantized: &Tensor, float: &Tensor, lambda: f64) -> Result<Tensor> {
    if dequantized.shape() != float.shape() {
        bail!(Dimension, "mixup shapes {:?} and {:?} differ", dequantized.shape(), float.shape());
    }
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Argument, "mixup weight {} outside [0, 1]", lambda);
    }
    let data = dequantized.data().iter().zip(float.data()).map(|(&q, &f)| lambda * q + (1.0 - lambda) * f).collect();
    Tensor::new(float.shape(), data)
}

/// How the per-sample mixup weight is drawn during tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mixing {
    Beta(f64, f64),
    Fixed(f64),
}

/// Stacked representations of every merged sample through each frontend.
pub struct TuneSet {
    /// `[n, N+1, d]` float frontend output.
    pub float: Tensor,
    /// `[n, N+1, d]` dequantized output of each quantized frontend, index 0 first.
    pub quantized: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl TuneSet {
    pub fn build(float_frontend: &Frontend, frontends: &[QuantizedFrontend], data: &Dataset) -> Result<Self> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut float = Vec::new();
        let mut quantized = Vec::new();
        for chunk in idx.chunks(200) {
            let images = data.batch(chunk);
            float.push(float_frontend.forward(&images)?);
            let qs = frontends.iter().map(|f| f.forward(&images)).collect::<Result<Vec<_>>>()?;
            quantized.push(qs);
        }
        let cat = |parts: Vec<Tensor>| -> Result<Tensor> {
            let shape = parts[0].shape().to_vec();
            let n: usize = parts.iter().map(|p| p.shape()[0]).sum();
            let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
            Tensor::new(&[n, shape[1], shape[2]], data)
        };
        let mut per_frontend: Vec<Vec<Tensor>> = vec![Vec::new(); frontends.len()];
        for qs in quantized {
            for (m, q) in qs.into_iter().enumerate() {
                per_frontend[m].push(q);
            }
        }
        Ok(Self {
            float: cat(float)?,
            quantized: per_frontend.into_iter().map(cat).collect::<Result<_>>()?,
            labels: data.labels_usize(&idx),
        })
    }

    fn rows(t: &Tensor, idx: &[usize]) -> Vec<f64> {
        let per = t.len() / t.shape()[0];
        idx.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect()
    }

    fn sample_shape(&self) -> (usize, usize) {
        (self.float.shape()[1], self.float.shape()[2])
    }

    /// Mean cross-entropy of the tuning objective over the whole set for fixed weights.
    pub fn loss(&self, backend: &Backend, head: &TaskModule, lambda: f64) -> Result<f64> {
        let n = self.labels.len();
        let idx: Vec<usize> = (0..n).collect();
        let (t, d) = self.sample_shape();
        let mut total = 0.0;
        for q in &self.quantized {
            for chunk in idx.chunks(200) {
                let mixed = mixup_representation(
                    &Tensor::new(&[chunk.len(), t, d], Self::rows(q, chunk))?,
                    &Tensor::new(&[chunk.len(), t, d], Self::rows(&self.float, chunk))?,
                    lambda,
                )?;
                let labels: Vec<usize> = chunk.iter().map(|&i| self.labels[i]).collect();
                let mut g = Graph::new();
                let x = g.constant(mixed);
                let out = backend.forward_on(&mut g, x, false)?.out;
                let cls = g.select_token(out, 0)?;
                let (logits, _) = head.forward_on(&mut g, cls, false)?;
                let loss = g.cross_entropy(logits, &labels)?;
                total += g.value(loss).item() * chunk.len() as f64;
            }
        }
        Ok(total / (n * self.quantized.len()).max(1) as f64)
    }
}

/// Tunes backend and head on mixup representations from all frontends; the
/// frontends stay frozen. Every batch stacks the same samples once per frontend.
pub fn qat_tune_backend(
    backend: &Backend,
    head: &TaskModule,
    set: &TuneSet,
    mixing: Mixing,
    cfg: &TrainConfig,
) -> Result<(Backend, TaskModule)> {
    cfg.check()?;
    let mut backend = backend.clone();
    let mut head = head.clone();
    let n = set.labels.len();
    let (t, d) = set.sample_shape();
    let per = t * d;
    let mut rng = SaRng::stream(cfg.seed, 0);
    let mut opt = Adam::new(cfg.lr);
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        for idx in batches(&order, cfg.batch_size) {
            let mut data = Vec::with_capacity(idx.len() * per * set.quantized.len());
            let mut labels = Vec::new();
            for q in &set.quantized {
                for &i in idx {
                    let lambda = match mixing {
                        Mixing::Beta(a, b) => rng.beta(a, b),
                        Mixing::Fixed(l) => l,
                    };
                    let qs = &q.data()[i * per..(i + 1) * per];
                    let fs = &set.float.data()[i * per..(i + 1) * per];
                    data.extend(qs.iter().zip(fs).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b));
                    labels.push(set.labels[i]);
                }
            }
            if labels.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[labels.len(), t, d], data)?);
            let bv = backend.forward_on(&mut g, x, true)?;
            let cls = g.select_token(bv.out, 0)?;
            let (logits, hv) = head.forward_on(&mut g, cls, true)?;
            let loss = g.cross_entropy(logits, &labels)?;
            check_finite(g.value(loss).item(), "tuning")?;
            g.backward(loss)?;
            let grads: Vec<Option<Tensor>> = bv.params.iter().chain(&hv).map(|&v| g.grad(v).cloned()).collect();
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            let mut ps = backend.tensors_mut();
            ps.extend(head.tensors_mut());
            opt.step(&mut ps, &grad_refs);
        }
    }
    Ok((backend, head))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub spec: ModelSpec,
    pub split: usize,
    pub quant: QuantConfig,
    pub tune: TrainConfig,
    /// Include HT-augmented copies in the calibration/tuning set.
    pub use_ht: bool,
    /// Run the mixup quantization-aware backend tuning.
    pub use_qat: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            spec: ModelSpec::default(),
            split: 4,
            quant: QuantConfig::default(),
            tune: TrainConfig { epochs: 1, batch_size: 32, lr: 1e-5, seed: 13 },
            use_ht: true,
            use_qat: true,
        }
    }
}

/// Everything the server holds once preparation is done.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub spec: ModelSpec,
    pub params: VitParams,
    /// Server head before tuning.
    pub server_head: TaskModule,
    pub split: SplitModel,
    /// Index 0: full-set frontend; `1..=M`: subset frontends.
    pub frontends: Vec<QuantizedFrontend>,
    /// Backend after tuning (equal to the split backend when tuning is off).
    pub backend: Backend,
    pub tuned_head: TaskModule,
}

impl ServerState {
    /// The frontend sent to clients.
    pub fn package(&self) -> &QuantizedFrontend {
        &self.frontends[0]
    }
}

pub fn prepare_server(
    params: &VitParams,
    head: &TaskModule,
    server_data: &Dataset,
    cfg: &ServerConfig,
) -> Result<ServerState> {
    let spec = cfg.spec;
    let split = params.split(&spec, cfg.split)?;
    let calib = if cfg.use_ht { build_merged_dataset(server_data)? } else { server_data.clone() };
    let frontends = build_subset_frontends(&split, head, &calib, &cfg.quant)?;
    let (backend, tuned_head) = if cfg.use_qat {
        let set = TuneSet::build(&split.frontend, &frontends, &calib)?;
        qat_tune_backend(&split.backend, head, &set, Mixing::Beta(0.75, 0.75), &cfg.tune)?
    } else {
        (split.backend.clone(), head.clone())
    };
    Ok(ServerState { spec, params: params.clone(), server_head: head.clone(), split, frontends, backend, tuned_head })
}
