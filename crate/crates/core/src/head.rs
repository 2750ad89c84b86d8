//! Task modules: linear (or two-layer) classifiers on the class-token row.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::rng::SaRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModule {
    /// `(weight [in, out], bias [out])` pairs; GELU between consecutive layers.
    pub layers: Vec<(Tensor, Tensor)>,
}

fn init_linear(rng: &mut SaRng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let data = (0..fan_in * fan_out)
        .map(|_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break 0.02 * z;
            }
        })
        .collect();
    (Tensor::new(&[fan_in, fan_out], data).expect("shape"), Tensor::zeros(&[fan_out]))
}

impl TaskModule {
    pub fn linear(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = SaRng::new(seed);
        Self { layers: alloc::vec![init_linear(&mut rng, dim, classes)] }
    }

    /// Two linear layers with a GELU in between.
    pub fn wide(dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = SaRng::new(seed);
        Self { layers: alloc::vec![init_linear(&mut rng, dim, hidden), init_linear(&mut rng, hidden, classes)] }
    }

    pub fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        if ts.is_empty() || ts.len() % 2 != 0 {
            bail!(Argument, "task module needs weight/bias pairs, got {} tensors", ts.len());
        }
        let mut layers = Vec::new();
        let mut it = ts.into_iter();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            if w.rank() != 2 || b.shape() != [w.shape()[1]] {
                bail!(Dimension, "bad task layer shapes {:?} / {:?}", w.shape(), b.shape());
            }
            layers.push((w, b));
        }
        for pair in layers.windows(2) {
            if pair[0].0.shape()[1] != pair[1].0.shape()[0] {
                bail!(Dimension, "task layers do not chain");
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.0.shape()[1])
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Logits for `x: [b, d]`; returns the logits and bound parameters.
    pub fn forward_on(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut vars = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = if trainable {
                (g.leaf(w.clone()), g.leaf(b.clone()))
            } else {
                (g.constant(w.clone()), g.constant(b.clone()))
            };
            vars.push(wv);
            vars.push(bv);
            if i > 0 {
                h = g.gelu(h);
            }
            h = g.matmul(h, wv)?;
            h = g.add_broadcast(h, bv)?;
        }
        Ok((h, vars))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_on(&mut g, xv, false)?;
        Ok(g.value(out).clone())
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits: [b, c]` whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count();
    correct as f64 / labels.len() as f64
}
