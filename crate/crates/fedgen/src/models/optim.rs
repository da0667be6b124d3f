//! AdamW over flat f32 gradient buffers.
//!
//! Gradients arrive as one flat array per parameter, which lets DP-SGD hand
//! over clipped/noised aggregates through the same interface as plain
//! backprop.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `grads[i]` is the flat gradient for `vars[i]`.
    pub fn step(&mut self, vars: &[Var], grads: &[Vec<f32>]) -> Result<()> {
        if vars.len() != grads.len() {
            return Err(Error::Argument(format!(
                "{} vars vs {} gradient buffers",
                vars.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (var, grad)) in vars.iter().zip(grads).enumerate() {
            let t = var.as_tensor();
            let mut values = t.flatten_all()?.to_vec1::<f32>()?;
            if values.len() != grad.len() {
                return Err(Error::Argument(format!(
                    "gradient buffer {i} has {} elements, parameter has {}",
                    grad.len(),
                    values.len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..values.len() {
                let g = grad[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut p = values[j] as f64;
                // decoupled weight decay
                p -= self.lr * self.weight_decay * p;
                p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                values[j] = p as f32;
            }
            let shape = t.dims().to_vec();
            var.set(&Tensor::from_vec(values, shape, t.device())?)?;
        }
        Ok(())
    }
}

/// Flatten the gradients of `vars` out of a backward pass; parameters the
/// loss does not reach get zero gradients.
pub fn flat_grads(
    grads: &candle_core::backprop::GradStore,
    vars: &[Var],
) -> Result<Vec<Vec<f32>>> {
    vars.iter()
        .map(|var| {
            let t = var.as_tensor();
            match grads.get(t) {
                Some(g) => Ok(g.flatten_all()?.to_vec1::<f32>()?),
                None => Ok(vec![0.0; t.elem_count()]),
            }
        })
        .collect()
}
