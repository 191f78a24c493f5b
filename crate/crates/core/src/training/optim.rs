use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::codec::CodecParams;
use crate::tensor::Matrix;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update with learning rate `lr`. Arrays without a gradient entry
    /// still decay.
    pub fn step(&mut self, params: &mut CodecParams, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let decay = 1.0 - lr * self.weight_decay;
            let Some(g) = grads.get(name) else {
                p.as_mut_slice().iter_mut().for_each(|x| *x *= decay);
                continue;
            };
            let (rows, cols) = p.shape();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Matrix::zeros(rows, cols));
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((x, &g), (m, v)) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x = *x * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` to `base * min_fraction` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min_fraction: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let floor = self.base * self.min_fraction;
        if self.total <= 1 {
            return self.base;
        }
        let progress = (step.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        floor + 0.5 * (self.base - floor) * (1.0 + (PI * progress).cos())
    }
}
