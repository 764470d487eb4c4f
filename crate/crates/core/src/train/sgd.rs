//! Stochastic gradient descent with momentum and selective weight decay:
//! `v ← m·v + g + wd·p`, `p ← p − lr·v`, with layer normalization parameters
//! and all biases exempt from decay.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Scalar;

pub struct SgdState<E: Scalar> {
    velocities: Vec<Vec<E>>,
    pub momentum: E,
    pub weight_decay: E,
}

impl<E: Scalar> SgdState<E> {
    pub fn new(params: &[Param<E>], momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            velocities: params.iter().map(|p| vec![E::zero(); p.tensor.numel()]).collect(),
            momentum: E::from_f64(momentum),
            weight_decay: E::from_f64(weight_decay),
        }
    }

    pub fn velocity(&self, index: usize) -> &[E] {
        &self.velocities[index]
    }

    pub fn velocity_mut(&mut self, index: usize) -> &mut Vec<E> {
        &mut self.velocities[index]
    }

    /// One update over all parameters; `lrs[i]` is the learning rate for
    /// `params[i]` this iteration. Parameters that received no gradient are
    /// left untouched. Gradients are consumed (zeroed) by the step.
    pub fn step(&mut self, params: &[Param<E>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.velocities.len() || params.len() != lrs.len() {
            return Err(Error::Contract(format!(
                "optimizer state for {} parameters, got {} params / {} rates",
                self.velocities.len(),
                params.len(),
                lrs.len()
            )));
        }
        for (i, param) in params.iter().enumerate() {
            let Some(grad) = param.tensor.grad() else {
                continue;
            };
            if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} in parameter {}",
                    param.name
                )));
            }
            let wd = if param.decay_exempt { E::zero() } else { self.weight_decay };
            let lr = E::from_f64(lrs[i]);
            let momentum = self.momentum;
            let velocity = &mut self.velocities[i];
            param.tensor.apply_update(|values| {
                for ((v, &g), p) in velocity.iter_mut().zip(&grad).zip(values.iter_mut()) {
                    *v = momentum * *v + g + wd * *p;
                    *p = *p - lr * *v;
                }
            });
            param.tensor.zero_grad();
        }
        Ok(())
    }
}
