//! Central finite-difference gradient checking.
//!
//! Only the forward values of the graph are used here, so the check is
//! independent of every backward rule it verifies.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, abs_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` among entries above the floor.
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Builds `f` on a fresh graph with `inputs` as leaves and compares its
/// backward gradients to central differences of the forward value.
pub fn check<F>(inputs: &[Tensor], cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradReport { worst_rel: 0.0, worst_abs: 0.0, checked: 0, failures: 0 };
    let mut xs = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..xs[ti].len() {
            let orig = xs[ti].data()[i];
            xs[ti].data_mut()[i] = orig + cfg.step;
            let plus = eval(&xs)?;
            xs[ti].data_mut()[i] = orig - cfg.step;
            let minus = eval(&xs)?;
            xs[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            report.worst_abs = report.worst_abs.max(abs);
            if abs > cfg.abs_floor {
                let rel = abs / scale;
                report.worst_rel = report.worst_rel.max(rel);
                if rel > cfg.rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

type CaseFn = alloc::boxed::Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One named differentiable expression with random inputs.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

fn rand_tensor(rng: &mut crate::rng::SaRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).expect("shape")
}

/// Reduces `y` to a scalar with fixed random weights so every output entry matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = crate::rng::SaRng::new(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Every differentiable operation plus a two-layer MLP and a tiny ViT with a
/// classification loss, each on inputs drawn from `seed`.
pub fn standard_cases(seed: u64) -> Vec<Case> {
    use crate::rng::SaRng;
    use crate::vit::{ModelSpec, VitParams};
    use alloc::boxed::Box;

    let mut rng = SaRng::new(seed);
    let mut cases = Vec::new();
    let (m, k, n) = (2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));

    cases.push(Case {
        name: "matmul",
        inputs: alloc::vec![rand_tensor(&mut rng, &[m, k], 1.0), rand_tensor(&mut rng, &[k, n], 1.0)],
        f: Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, seed)
        }),
    });
    cases.push(Case {
        name: "bmm",
        inputs: alloc::vec![rand_tensor(&mut rng, &[2, m, k], 1.0), rand_tensor(&mut rng, &[2, k, n], 1.0)],
        f: Box::new(move |g, v| {
            let y = g.bmm(v[0], v[1], false)?;
            weighted_sum(g, y, seed)
        }),
    });
    cases.push(Case {
        name: "bmm_transposed",
        inputs: alloc::vec![rand_tensor(&mut rng, &[2, m, k], 1.0), rand_tensor(&mut rng, &[2, n, k], 1.0)],
        f: Box::new(move |g, v| {
            let y = g.bmm(v[0], v[1], true)?;
            weighted_sum(g, y, seed)
        }),
    });
    cases.push(Case {
        name: "add_sub_mul_scale",
        inputs: alloc::vec![rand_tensor(&mut rng, &[m, n], 1.0), rand_tensor(&mut rng, &[m, n], 1.0)],
        f: Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let p = g.mul(s, v[1])?;
            let y = g.scale(p, 0.7);
            weighted_sum(g, y, seed)
        }),
    });
    cases.push(Case {
        name: "add_broadcast",
        inputs: alloc::vec![rand_tensor(&mut rng, &[2, m, n], 1.0), rand_tensor(&mut rng, &[n], 1.0)],
        f: Box::new(move |g, v| {
            let y = g.add_broadcast(v[0], v[1])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, seed)
        }),
    });
    cases.push(Case {
        name: "softmax_rows",
        inputs: alloc::vec![rand_tensor(&mut rng, &[m, n + 1], 2.0)],
        f: Box::new(move |g, v| {
            let y = g.softmax_rows(v[0]);
            weighted_sum(g, y, seed)
        }),
    });
    let d = 3 + rng.below(4);
    cases.push(Case {
        name: "layer_norm",
        inputs: alloc::vec![
            rand_tensor(&mut rng, &[m, d], 1.5),
            rand_tensor(&mut rng, &[d], 1.0),
            rand_tensor(&mut rng, &[d], 1.0)
        ],
        f: Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(g, y, seed)
        }),
    });
    cases.push(Case {
        name: "gelu",
        inputs: alloc::vec![rand_tensor(&mut rng, &[m, n], 2.0)],
        f: Box::new(move |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, seed)
        }),
    });
    cases.push(Case {
        name: "sigmoid",
        inputs: alloc::vec![rand_tensor(&mut rng, &[m, n], 2.0)],
        f: Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, seed)
        }),
    });
    let classes = 2 + rng.below(4);
    let labels: Vec<usize> = (0..m).map(|_| rng.below(classes)).collect();
    cases.push(Case {
        name: "cross_entropy",
        inputs: alloc::vec![rand_tensor(&mut rng, &[m, classes], 2.0)],
        f: Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
    });
    let target = rand_tensor(&mut rng, &[m, n], 1.0);
    cases.push(Case {
        name: "mse_mean",
        inputs: alloc::vec![rand_tensor(&mut rng, &[m, n], 1.0)],
        f: Box::new(move |g, v| {
            let a = g.mse(v[0], &target)?;
            let b = g.mean(v[0]);
            let b = g.scale(b, 0.3);
            g.add(a, b)
        }),
    });
    cases.push(Case {
        name: "heads_tokens_gather",
        inputs: alloc::vec![rand_tensor(&mut rng, &[2, 3, 4], 1.0), rand_tensor(&mut rng, &[4], 1.0)],
        f: Box::new(move |g, v| {
            let x = g.prepend_token(v[0], v[1])?;
            let h = g.split_heads(x, 2)?;
            let h = g.mul(h, h)?;
            let x = g.merge_heads(h, 2)?;
            let a = g.select_token(x, 1)?;
            let b = g.drop_tokens(x, 2)?;
            let sa = weighted_sum(g, a, seed)?;
            let sb = weighted_sum(g, b, seed + 1)?;
            g.add(sa, sb)
        }),
    });

    let hidden = 3 + rng.below(4);
    let mlp_labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
    cases.push(Case {
        name: "two_layer_mlp",
        inputs: alloc::vec![
            rand_tensor(&mut rng, &[4, 5], 1.0),
            rand_tensor(&mut rng, &[5, hidden], 0.5),
            rand_tensor(&mut rng, &[hidden], 0.1),
            rand_tensor(&mut rng, &[hidden, 3], 0.5),
            rand_tensor(&mut rng, &[3], 0.1)
        ],
        f: Box::new(move |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_broadcast(h, v[2])?;
            let h = g.gelu(h);
            let o = g.matmul(h, v[3])?;
            let o = g.add_broadcast(o, v[4])?;
            g.cross_entropy(o, &mlp_labels)
        }),
    });

    let spec = ModelSpec {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        embed_dim: 4,
        num_heads: 2,
        mlp_hidden: 6,
        num_layers: 3,
        layernorm_eps: 1e-6,
    };
    let mut params = VitParams::init(&spec, &mut rng).expect("valid spec");
    // Larger weights than the default init so every path carries signal.
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.3 * rng.normal();
        }
    }
    let images = rand_tensor(&mut rng, &[2, 4, 4, 1], 0.5);
    let head = rand_tensor(&mut rng, &[4, 3], 0.5);
    let vit_labels: Vec<usize> = (0..2).map(|_| rng.below(3)).collect();
    let mut inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    inputs.push(head);
    cases.push(Case {
        name: "tiny_vit",
        inputs,
        f: Box::new(move |g, v| {
            let n = v.len() - 1;
            vit_loss(g, &spec, &v[..n], &images, v[n], &vit_labels)
        }),
    });
    cases
}

/// Tiny-ViT loss using pre-bound parameter vars (so gradients reach them).
fn vit_loss(
    g: &mut Graph,
    spec: &crate::vit::ModelSpec,
    vars: &[Var],
    images: &Tensor,
    head: Var,
    labels: &[usize],
) -> Result<Var> {
    use crate::vit::{embed, encoder_layer, EmbedVars, LayerVars};
    let e = EmbedVars { patch_proj: vars[0], pos: vars[1], cls: vars[2] };
    let mut x = embed(g, spec, images, &e)?;
    for l in 0..spec.num_layers {
        let s = &vars[3 + 12 * l..3 + 12 * (l + 1)];
        let lv = LayerVars {
            wq: s[0],
            wk: s[1],
            wv: s[2],
            wo: s[3],
            ln1_gain: s[4],
            ln1_bias: s[5],
            w1: s[6],
            b1: s[7],
            w2: s[8],
            b2: s[9],
            ln2_gain: s[10],
            ln2_bias: s[11],
        };
        x = encoder_layer(g, spec, x, &lv)?;
    }
    let n = vars.len();
    let y = g.layer_norm(x, vars[n - 2], vars[n - 1], spec.layernorm_eps)?;
    let cls = g.select_token(y, 0)?;
    let logits = g.matmul(cls, head)?;
    g.cross_entropy(logits, labels)
}
