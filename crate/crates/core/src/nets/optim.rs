use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use super::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The rate is multiplied by `decay_factor` at each of these step counts.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_steps: Vec::new(),
            decay_factor: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let n = self.decay_steps.iter().filter(|&&s| step >= s).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update; `grads[i]` is the summed gradient of parameter `i` (or `None` if unused).
    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<f64>>], scale: f64) {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let upd = lr * (*m / bc1) / ((*v / bc2).sqrt() + self.cfg.eps);
                *p = T::from_f64_lossy(p.as_f64() - upd);
            }
        }
    }
}
