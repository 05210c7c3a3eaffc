//! Adaptive-moment optimizer with bias correction and decoupled weight
//! decay.

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Tensors without a populated grad
    /// are treated as having zero gradient (still weight-decayed).
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::Contract(format!(
                "optimizer built for {} parameters, given {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (pi, p) in params.iter_mut().enumerate() {
            if p.len() != self.m[pi].len() {
                return Err(TensorError::Contract(format!(
                    "parameter {pi} changed size ({} vs {})",
                    p.len(),
                    self.m[pi].len()
                )));
            }
            let zero;
            let grad: &[f64] = match p.grad() {
                Some(g) => g,
                None => {
                    zero = vec![0.0; p.len()];
                    &zero
                }
            };
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let grad = grad.to_vec();
            let data = p.data_mut();
            for k in 0..data.len() {
                let g = grad[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                data[k] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                // Decoupled decay, applied after the moment update.
                data[k] -= c.learning_rate * c.weight_decay * data[k];
            }
        }
        Ok(())
    }
}
