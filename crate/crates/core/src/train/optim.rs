//! Adam and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: store.zeros_like(),
            v: store.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update; `grads[k]` belongs to the k-th parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    WarmupCosine,
    Constant,
}

/// Learning rate at position `s` of `[0, steps]`: linear from 0 to `peak`
/// over the warmup, then cosine down to 0 at `steps`.
pub fn lr_at(schedule: Schedule, peak: f64, warmup: usize, steps: usize, s: usize) -> f64 {
    match schedule {
        Schedule::Constant => peak,
        Schedule::WarmupCosine => {
            let s = s.min(steps);
            if s < warmup {
                return peak * s as f64 / warmup as f64;
            }
            if steps == warmup {
                return peak;
            }
            let frac = (s - warmup) as f64 / (steps - warmup) as f64;
            peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_shape() {
        let lr = |s| lr_at(Schedule::WarmupCosine, 3e-3, 50, 400, s);
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(50), 3e-3);
        assert!(lr(400).abs() < 1e-9);
        for s in 0..50 {
            assert!(lr(s + 1) >= lr(s));
        }
        for s in 50..400 {
            assert!(lr(s + 1) <= lr(s));
        }
        assert_eq!(lr_at(Schedule::Constant, 1e-3, 10, 100, 0), 1e-3);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5, -2.0]).unwrap()).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let zeros = store.zeros_like();
        adam.step(&mut store, &zeros, 1e-2);
        assert_eq!(store.get(store.find("w").unwrap()), before.get(before.find("w").unwrap()));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = vec![Tensor::vector(vec![4.0]).unwrap()];
        adam.step(&mut store, &g, 0.1);
        let w = store.get(store.find("w").unwrap()).data()[0];
        assert!((w - 0.9).abs() < 1e-8);
    }
}
