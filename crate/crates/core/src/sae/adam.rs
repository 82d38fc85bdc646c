use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias correction, one moment pair per registered tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let m = shapes.iter().map(|s| ArrayD::zeros(IxDyn(s))).collect::<Vec<_>>();
        Self {
            config,
            lr,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn step(&mut self, slot: usize, param: ArrayViewMutD<f64>, grad: ArrayViewD<f64>) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.lr;
        Zip::from(param)
            .and(grad)
            .and(&mut self.m[slot])
            .and(&mut self.v[slot])
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }

    /// Zeroes moments of tensor `slot` at the given flat positions.
    pub fn reset(&mut self, slot: usize, positions: impl IntoIterator<Item = usize>) {
        let m = self.m[slot].as_slice_mut().expect("contiguous moments");
        let v = self.v[slot].as_slice_mut().expect("contiguous moments");
        for i in positions {
            m[i] = 0.0;
            v[i] = 0.0;
        }
    }
}
