//! Final adaptation of backend + task module on uploaded representations,
//! and the comparison baselines.

use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::client::client_loss;
use crate::error::{bail, Result};
use crate::head::{accuracy, TaskModule};
use crate::optim::Adam;
use crate::quant::QuantizedFrontend;
use crate::rng::SaRng;
use crate::server::cls_rows;
use crate::tensor::Tensor;
use crate::vit::{Backend, ModelSpec, SplitModel, VitParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-3, batch_size: 32, seed: 1 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate {} invalid", self.lr);
        }
        Ok(())
    }
}

/// Source of `(loss, ∂loss/∂logits)` for a batch of sample ids. The server
/// never sees labels; the protocol implementation asks the client.
pub trait LossOracle {
    fn loss_grad(&mut self, ids: &[u32], logits: &Tensor) -> Result<(f64, Tensor)>;
}

/// Labels held locally; id `j·n + i` maps to sample `i`.
pub struct LocalOracle<'a> {
    pub labels: &'a [usize],
}

impl LossOracle for LocalOracle<'_> {
    fn loss_grad(&mut self, ids: &[u32], logits: &Tensor) -> Result<(f64, Tensor)> {
        let labels = labels_for_ids(self.labels, ids)?;
        client_loss(logits, &labels)
    }
}

pub fn labels_for_ids(labels: &[usize], ids: &[u32]) -> Result<Vec<usize>> {
    if labels.is_empty() {
        bail!(Protocol, "no labels held");
    }
    Ok(ids.iter().map(|&id| labels[id as usize % labels.len()]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub backend: Backend,
    pub head: TaskModule,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

fn check_sets(sets: &[Tensor]) -> Result<usize> {
    let Some(first) = sets.first() else {
        bail!(Argument, "no training representations");
    };
    let n = first.shape()[0];
    if n == 0 || sets.iter().any(|s| s.shape() != first.shape()) {
        bail!(Dimension, "training sets must be nonempty and equally shaped");
    }
    Ok(n)
}

fn gather(sets: &[Tensor], n: usize, ids: &[u32]) -> Result<Tensor> {
    let per = sets[0].len() / n;
    let mut data = Vec::with_capacity(ids.len() * per);
    for &id in ids {
        let (j, i) = (id as usize / n, id as usize % n);
        data.extend_from_slice(&sets[j].data()[i * per..(i + 1) * per]);
    }
    let mut shape = sets[0].shape().to_vec();
    shape[0] = ids.len();
    Tensor::new(&shape, data)
}

/// Shared training loop: every epoch visits all `count` ids in a fresh order.
fn train_epochs(count: usize, cfg: &AdaptConfig, mut step: impl FnMut(&[u32]) -> Result<f64>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = SaRng::stream(cfg.seed, 2);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order: Vec<u32> = rng.permutation(count).into_iter().map(|i| i as u32).collect();
        let mut total = 0.0;
        for ids in order.chunks(cfg.batch_size) {
            let loss = step(ids)?;
            if !loss.is_finite() {
                bail!(Training, "non-finite loss {} in epoch {}", loss, epoch);
            }
            total += loss * ids.len() as f64;
        }
        losses.push(total / count as f64);
    }
    Ok(losses)
}

/// Trains only `head` on fixed features `[n, d]` (one tensor per augmentation copy).
pub fn fit_head(
    head: &TaskModule,
    features: &[Tensor],
    cfg: &AdaptConfig,
    oracle: &mut dyn LossOracle,
) -> Result<(TaskModule, Vec<f64>)> {
    let n = check_sets(features)?;
    let mut head = head.clone();
    let mut opt = Adam::new(cfg.lr);
    let losses = train_epochs(n * features.len(), cfg, |ids| {
        let x = gather(features, n, ids)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (logits, hv) = head.forward_on(&mut g, xv, true)?;
        let (loss, grad) = oracle.loss_grad(ids, g.value(logits))?;
        g.backward_from(logits, &grad)?;
        let grads: Vec<Option<Tensor>> = hv.iter().map(|&v| g.grad(v).cloned()).collect();
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
        opt.step(&mut head.tensors_mut(), &refs);
        Ok(loss)
    })?;
    Ok((head, losses))
}

/// Trains backend and head on dequantized representations `[n, N+1, d]`, one
/// tensor per augmentation copy `j`. With `train_backend` false only the head
/// moves, on features computed once by the frozen backend.
pub fn adapt(
    backend: &Backend,
    head: &TaskModule,
    sets: &[Tensor],
    train_backend: bool,
    cfg: &AdaptConfig,
    oracle: &mut dyn LossOracle,
) -> Result<AdaptOutcome> {
    let n = check_sets(sets)?;
    if !train_backend {
        let features = sets.iter().map(|s| backend_features(backend, s)).collect::<Result<Vec<_>>>()?;
        let (head, epoch_losses) = fit_head(head, &features, cfg, oracle)?;
        return Ok(AdaptOutcome { backend: backend.clone(), head, epoch_losses });
    }
    let mut backend = backend.clone();
    let mut head = head.clone();
    let mut opt = Adam::new(cfg.lr);
    let epoch_losses = train_epochs(n * sets.len(), cfg, |ids| {
        let x = gather(sets, n, ids)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let bv = backend.forward_on(&mut g, xv, true)?;
        let cls = g.select_token(bv.out, 0)?;
        let (logits, hv) = head.forward_on(&mut g, cls, true)?;
        let (loss, grad) = oracle.loss_grad(ids, g.value(logits))?;
        g.backward_from(logits, &grad)?;
        let grads: Vec<Option<Tensor>> = bv.params.iter().chain(&hv).map(|&v| g.grad(v).cloned()).collect();
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
        let mut ps = backend.tensors_mut();
        ps.extend(head.tensors_mut());
        opt.step(&mut ps, &refs);
        Ok(loss)
    })?;
    Ok(AdaptOutcome { backend, head, epoch_losses })
}

/// Final-norm CLS rows of the backend output, `[n, d]`.
pub fn backend_features(backend: &Backend, reps: &Tensor) -> Result<Tensor> {
    let n = reps.shape()[0];
    let per = reps.len() / n.max(1);
    let mut rows = Vec::with_capacity(n * backend.spec.embed_dim);
    let mut start = 0;
    while start < n {
        let end = (start + 200).min(n);
        let mut shape = reps.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(&shape, reps.data()[start * per..end * per].to_vec())?;
        rows.extend(cls_rows(&backend.forward(&chunk)?).into_data());
        start = end;
    }
    Tensor::new(&[n, backend.spec.embed_dim], rows)
}

/// Logits of backend + head for representations `[n, N+1, d]`.
pub fn backend_logits(backend: &Backend, head: &TaskModule, reps: &Tensor) -> Result<Tensor> {
    head.logits(&backend_features(backend, reps)?)
}

/// Argmax accuracy, ties to the lowest class.
pub fn evaluate(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        bail!(Dimension, "{} labels for logits {:?}", labels.len(), logits.shape());
    }
    Ok(accuracy(logits, labels))
}

/// Linear probing: float model frozen, only a fresh head is trained on its final CLS rows.
pub fn baseline_linear_probe(
    spec: &ModelSpec,
    params: &VitParams,
    classes: usize,
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
    cfg: &AdaptConfig,
) -> Result<f64> {
    let feats = |images: &Tensor| -> Result<Tensor> { Ok(cls_rows(&params.forward(spec, images)?)) };
    probe(feats(train.0)?, train.1, feats(test.0)?, test.1, classes, cfg)
}

/// Probe on the split-layer CLS row of the noiseless quantized frontend (no backend).
pub fn baseline_quant_frontend_probe(
    frontend: &QuantizedFrontend,
    classes: usize,
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
    cfg: &AdaptConfig,
) -> Result<f64> {
    let feats = |images: &Tensor| -> Result<Tensor> { Ok(cls_rows(&frontend.forward(images)?)) };
    probe(feats(train.0)?, train.1, feats(test.0)?, test.1, classes, cfg)
}

fn probe(
    train: Tensor,
    train_labels: &[usize],
    test: Tensor,
    test_labels: &[usize],
    classes: usize,
    cfg: &AdaptConfig,
) -> Result<f64> {
    let head = fresh_head(train.shape()[1], classes, cfg.seed);
    let (head, _) = fit_head(&head, &[train], cfg, &mut LocalOracle { labels: train_labels })?;
    evaluate(&head.logits(&test)?, test_labels)
}

/// The randomly initialized task module used by every adaptation mode.
pub fn fresh_head(dim: usize, classes: usize, seed: u64) -> TaskModule {
    TaskModule::linear(dim, classes, crate::rng::derive_seed(seed, 1))
}

/// One split-learning step's view from the server: frozen backend, activations
/// in, backend CLS features out, and the gradient back to the activations.
pub trait SplitServer {
    fn features(&mut self, activations: &Tensor) -> Result<Tensor>;
    fn activation_grad(&mut self, feature_grad: &Tensor) -> Result<Tensor>;
}

/// Frozen backend evaluated in-process.
pub struct LocalSplitServer<'a> {
    pub backend: &'a Backend,
    last: Option<Tensor>,
}

impl<'a> LocalSplitServer<'a> {
    pub fn new(backend: &'a Backend) -> Self {
        Self { backend, last: None }
    }
}

impl SplitServer for LocalSplitServer<'_> {
    fn features(&mut self, activations: &Tensor) -> Result<Tensor> {
        self.last = Some(activations.clone());
        backend_features(self.backend, activations)
    }

    fn activation_grad(&mut self, feature_grad: &Tensor) -> Result<Tensor> {
        let Some(x) = self.last.take() else {
            bail!(Protocol, "gradient requested before features");
        };
        split_backward(self.backend, &x, feature_grad)
    }
}

/// `∂(features · seed)/∂activations` through the frozen backend.
pub fn split_backward(backend: &Backend, activations: &Tensor, feature_grad: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.leaf(activations.clone());
    let bv = backend.forward_on(&mut g, xv, false)?;
    let cls = g.select_token(bv.out, 0)?;
    g.backward_from(cls, feature_grad)?;
    Ok(g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(activations.shape())))
}

/// Split learning: the client trains its float frontend and task module
/// through activations/gradients exchanged with a frozen server backend.
pub fn train_split_learning(
    split: &SplitModel,
    classes: usize,
    images: &Tensor,
    labels: &[usize],
    cfg: &AdaptConfig,
    server: &mut dyn SplitServer,
) -> Result<(SplitModel, TaskModule, Vec<f64>)> {
    let mut frontend = split.frontend.clone();
    let mut head = fresh_head(split.frontend.spec.embed_dim, classes, cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        bail!(Argument, "split learning needs one label per image");
    }
    let per = images.len() / n;
    let losses = train_epochs(n, cfg, |ids| {
        let mut shape = images.shape().to_vec();
        shape[0] = ids.len();
        let batch: Vec<f64> =
            ids.iter().flat_map(|&i| images.data()[i as usize * per..(i as usize + 1) * per].iter().copied()).collect();
        let batch = Tensor::new(&shape, batch)?;
        let batch_labels: Vec<usize> = ids.iter().map(|&i| labels[i as usize]).collect();
        let mut g = Graph::new();
        let acts = frontend.forward_on(&mut g, &batch, true)?;
        let feats = server.features(g.value(acts))?;
        let mut hg = Graph::new();
        let fv = hg.leaf(feats);
        let (logits, hv) = head.forward_on(&mut hg, fv, true)?;
        let (loss, dlogits) = client_loss(hg.value(logits), &batch_labels)?;
        hg.backward_from(logits, &dlogits)?;
        let dfeat = hg.grad(fv).cloned().unwrap_or_else(|| Tensor::zeros(hg.shape(fv)));
        let dact = server.activation_grad(&dfeat)?;
        g.backward_from(acts, &dact)?;
        let mut grads: Vec<Option<Tensor>> = frontend_param_vars(&g).into_iter().map(|v| g.grad(v).cloned()).collect();
        grads.extend(hv.iter().map(|&v| hg.grad(v).cloned()));
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
        let mut ps = frontend.tensors_mut();
        ps.extend(head.tensors_mut());
        opt.step(&mut ps, &refs);
        Ok(loss)
    })?;
    Ok((SplitModel { frontend, backend: split.backend.clone() }, head, losses))
}

/// Leaves of a graph built by `Frontend::forward_on(.., trainable = true)`, in tensor order.
fn frontend_param_vars(g: &Graph) -> Vec<crate::autograd::Var> {
    g.leaves()
}

/// Accuracy of a float split model + head on test images.
pub fn split_accuracy(split: &SplitModel, head: &TaskModule, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let acts = split.frontend.forward(images)?;
    evaluate(&backend_logits(&split.backend, head, &acts)?, labels)
}
