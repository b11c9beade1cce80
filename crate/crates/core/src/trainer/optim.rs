use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};

/// Parameter update rule applied to the accumulated gradients.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64);
}

/// Heavy-ball SGD: `v = mu v + g; w -= lr v`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: vec![],
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        if self.velocity.len() != ids.len() {
            self.velocity = ids.iter().map(|id| vec![0.0; store.get(*id).grad.len()]).collect();
        }
        for (id, v) in ids.iter().zip(&mut self.velocity) {
            let p = store.get_mut(*id);
            let grad = &p.grad;
            let w = p.value.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = self.momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![],
            v: vec![],
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        if self.m.len() != ids.len() {
            self.m = ids.iter().map(|id| vec![0.0; store.get(*id).grad.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((id, m), v) in ids.iter().zip(&mut self.m).zip(&mut self.v) {
            let p = store.get_mut(*id);
            let grad = &p.grad;
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Linear warm-up over the first `ratio` of training, 1-based `step`.
pub fn warmup_lr(lr: f64, step: usize, steps: usize, ratio: f64) -> f64 {
    let warm = ratio * steps as f64;
    if warm <= 0.0 {
        return lr;
    }
    lr * (step as f64 / warm).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_lr(1.0, 1, 100, 0.1), 0.1);
        assert_eq!(warmup_lr(1.0, 5, 100, 0.1), 0.5);
        assert_eq!(warmup_lr(1.0, 10, 100, 0.1), 1.0);
        assert_eq!(warmup_lr(1.0, 50, 100, 0.1), 1.0);
        assert_eq!(warmup_lr(0.3, 1, 100, 0.0), 0.3);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(1.0), true);
        let mut opt = Sgd::new(0.9);
        s.get_mut(id).grad[0] = 1.0;
        opt.step(&mut s, &[id], 0.1);
        assert!((s.get(id).value.item() - 0.9).abs() < 1e-15);
        opt.step(&mut s, &[id], 0.1);
        assert!((s.get(id).value.item() - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(0.0), true);
        s.get_mut(id).grad[0] = 3.0;
        Adam::default().step(&mut s, &[id], 0.01);
        assert!((s.get(id).value.item() + 0.01).abs() < 1e-9);
    }
}
