use serde::{Deserialize, Serialize};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over any number of parameter sets, stepped jointly with one learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update. `params[i]` is updated with `grads[i]`; the pairing
    /// must stay the same across calls.
    pub fn step(&mut self, params: &mut [&mut ParamSet], grads: &[&ParamSet]) {
        assert_eq!(params.len(), grads.len());
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter sets changed");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let mut k = 0;
            for (pg, gg) in p.groups_mut().iter_mut().zip(g.groups()) {
                for (w, &d) in pg.data.iter_mut().zip(&gg.data) {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * d;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * d * d;
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + eps);
                    k += 1;
                }
            }
        }
    }
}
