//! Adam optimizer over named parameter tensors.

use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state; `m`/`v` are aligned with the parameter index order.
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let zeros = |s: &Vec<usize>| ArrayD::zeros(ndarray::IxDyn(s));
        Adam {
            config,
            step: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        }
    }

    /// One update; `params[i]` moves along `grads[i]`.
    pub fn update(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for i in 0..params.len() {
            self.m[i].zip_mut_with(&grads[i], |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            self.v[i].zip_mut_with(&grads[i], |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let m = &self.m[i];
            let v = &self.v[i];
            ndarray::Zip::from(&mut params[i])
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
                });
        }
    }
}
