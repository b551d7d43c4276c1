//! Adam with bias correction.

use crate::diff::{Gradients, ParamStore};
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

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update. Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, store holds {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2, one) = (T::c(beta1), T::c(beta2), T::one());
        let step = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(eps);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.param(id) else {
                // zero gradient still decays the moments
                self.m[k].data_mut().iter_mut().for_each(|m| *m *= b1);
                self.v[k].data_mut().iter_mut().for_each(|v| *v *= b2);
                continue;
            };
            let p = params.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
