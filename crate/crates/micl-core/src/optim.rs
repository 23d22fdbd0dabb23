//! AdamW and SGD with deterministic, order-fixed updates.

use crate::tensor::Tensor;

/// Named parameter collection; update order is the insertion order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Decoupled-weight-decay Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update; `grads[i]` pairs with `params.entries[i]` (None skips the
    /// tensor but keeps its optimizer state aligned).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) {
        assert_eq!(params.entries.len(), grads.len(), "grad/param count mismatch");
        if self.moments.is_empty() {
            self.moments = params
                .entries
                .iter()
                .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (_, tensor)) in params.entries.iter_mut().enumerate() {
            let (m, v) = &mut self.moments[i];
            let g = match &grads[i] {
                Some(g) => g.as_slice(),
                None => continue,
            };
            for j in 0..tensor.len() {
                // Decoupled decay first, then the Adam update.
                tensor.data[j] -= self.lr * self.weight_decay * tensor.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                tensor.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        assert!(lr > 0.0 && (0.0..1.0).contains(&momentum));
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) {
        assert_eq!(params.entries.len(), grads.len(), "grad/param count mismatch");
        if self.velocity.is_empty() {
            self.velocity = params.entries.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        for (i, (_, tensor)) in params.entries.iter_mut().enumerate() {
            let g = match &grads[i] {
                Some(g) => g.as_slice(),
                None => continue,
            };
            let v = &mut self.velocity[i];
            for j in 0..tensor.len() {
                v[j] = self.momentum * v[j] + g[j];
                tensor.data[j] -= self.lr * v[j];
            }
        }
    }
}
