use std::collections::BTreeMap;

use ndarray::Zip;

use super::params::{ParamGroup, ParamStore};
use crate::autograd::{ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient and whose
    /// group passes `trainable`. Non-finite gradients abort the update and
    /// name the offending parameter group.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<ParamId, Tensor<T>>,
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        for (&id, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} ({})",
                    store.name(id),
                    store.group(id).as_str()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::cst(lr / bc1);
        let b1 = T::cst(self.beta1);
        let b2 = T::cst(self.beta2);
        let one = T::one();
        let inv_bc2 = T::cst(1.0 / bc2);
        let eps = T::cst(self.eps);
        for (&id, g) in grads {
            if !trainable(store.group(id)) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            let p = store.get_mut(id);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let vhat = *v * inv_bc2;
                *p -= step_size * *m / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
