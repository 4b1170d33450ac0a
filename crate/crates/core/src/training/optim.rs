use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParameters;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParameters, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut ModelParameters, grads: &[Tensor], learning_rate: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "optimizer: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            if g.numel() != p.numel() {
                return Err(Error::Internal(format!("optimizer: gradient {i} has the wrong size")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                *x -= learning_rate * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
