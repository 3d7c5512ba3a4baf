//! Adam optimizer over the convolution parameters of one network.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::layers::{Conv2d, GradStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub steps: u64,
    pub m_weights: Vec<Array2<f32>>,
    pub v_weights: Vec<Array2<f32>>,
    pub m_biases: Vec<Array1<f32>>,
    pub v_biases: Vec<Array1<f32>>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, convs: impl IntoIterator<Item = &'a Conv2d>) -> Self {
        let grads = GradStore::for_convs(convs);
        Adam {
            config,
            steps: 0,
            m_weights: grads.weights.clone(),
            v_weights: grads.weights,
            m_biases: grads.biases.clone(),
            v_biases: grads.biases,
        }
    }

    /// Applies one bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, convs: Vec<&mut Conv2d>, grads: &GradStore, lr: f32) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f32, g: &f32, m: &mut f32, v: &mut f32| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for conv in convs {
            let i = conv.id;
            Zip::from(&mut conv.weight)
                .and(&grads.weights[i])
                .and(&mut self.m_weights[i])
                .and(&mut self.v_weights[i])
                .for_each(update);
            Zip::from(&mut conv.bias)
                .and(&grads.biases[i])
                .and(&mut self.m_biases[i])
                .and(&mut self.v_biases[i])
                .for_each(update);
        }
    }
}
