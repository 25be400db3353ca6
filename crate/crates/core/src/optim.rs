//! Adam optimizer over a list of parameter tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8 }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let z = |p: &Tensor<T>| vec![T::zero(); p.len()];
        Self { step: 0, m: params.iter().map(z).collect(), v: params.iter().map(z).collect() }
    }

    /// Applies one update. `grads[i] == None` is treated as a zero gradient.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let one = T::one();
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let step_size = T::c(cfg.lr / bc1);
        let sqrt_bc2 = T::c(bc2.sqrt());
        let eps = T::c(cfg.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.len() {
                return Err(Error::Shape(format!("parameter {i} has {} elements, state {}", p.len(), m.len())));
            }
            match &grads[i] {
                Some(g) => {
                    for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        *w -= step_size * *mi / (vi.sqrt() / sqrt_bc2 + eps);
                    }
                }
                None => {
                    for ((w, mi), vi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi;
                        *vi = b2 * *vi;
                        *w -= step_size * *mi / (vi.sqrt() / sqrt_bc2 + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
