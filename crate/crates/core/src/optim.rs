//! Adam.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` of `None` leaves `params[i]` (and its moments) untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}
