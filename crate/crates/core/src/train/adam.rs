use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction over a list of tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { config, step: 0, m, v }
    }

    /// Updates only the tensors whose index `update` accepts.
    pub fn apply_selected(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], update: impl Fn(usize) -> bool) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        let lr = (c.learning_rate as f64 * bc2.sqrt() / bc1) as f32;
        let eps = (c.epsilon as f64 * bc2.sqrt()) as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !update(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                p[j] -= lr * m[j] / (v[j].sqrt() + eps);
            }
        }
    }

    pub fn apply(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>]) {
        self.apply_selected(params, grads, |_| true)
    }
}
