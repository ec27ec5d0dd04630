use serde::{Deserialize, Serialize};

use super::{cst, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers follow store order.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.numel()])
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1: T = cst(c.beta1);
        let b2: T = cst(c.beta2);
        let one = T::one();
        let corr1: T = cst(1.0 - c.beta1.powi(t));
        let corr2: T = cst(1.0 - c.beta2.powi(t));
        let lr: T = cst(c.learning_rate);
        let eps: T = cst(c.eps);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
