//! AdamW with decoupled weight decay and the warmup/inverse-square-root
//! learning-rate schedule.
//!
//! Decay touches only tensors of rank 2 or higher; biases, gains and the
//! mixing logits are exempt. Moments are stored per parameter name in the
//! working precision, so checkpoints round-trip bit-exactly.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Scheduled learning rate at 1-based step `t`: linear ramp over the
/// warmup, then decay proportional to 1/sqrt(t). With zero warmup the
/// ramp is skipped and decay starts from the base rate at step 1.
pub fn lr_at(t: u64, base: f64, warmup: u64) -> f64 {
    debug_assert!(t >= 1);
    if t <= warmup {
        base * t as f64 / warmup as f64
    } else {
        base * (warmup.max(1) as f64 / t as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed optimizer steps; drives bias correction.
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if eps <= 0.0 || weight_decay < 0.0 {
            return Err(Error::config(
                "adam eps must be positive and weight decay non-negative",
            ));
        }
        Ok(AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Marks the start of one optimizer step; every `update` until the next
    /// call shares this step's bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one AdamW update to a single parameter using its
    /// accumulated gradient (absent gradient counts as zero) at learning
    /// rate `lr`. Decoupled decay is applied only to rank >= 2 tensors.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::state("call begin_step before update"));
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::from_f64(0.0); n], vec![T::from_f64(0.0); n]));
        if m.len() != n {
            return Err(Error::dim(
                "parameter size changed under a stored optimizer moment",
            ));
        }
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let decay = if param.ndim() >= 2 {
            T::from_f64(lr * self.weight_decay)
        } else {
            T::from_f64(0.0)
        };

        let zero = T::from_f64(0.0);
        let grad = param.grad.take();
        let grad_at = |i: usize| grad.as_ref().map_or(zero, |g| g[i]);
        for i in 0..n {
            let g = grad_at(i);
            m[i] = b1 * m[i] + one_minus_b1 * g;
            v[i] = b2 * v[i] + one_minus_b2 * g * g;
            let m_hat = m[i] * corr1;
            let v_hat = v[i] * corr2;
            let p = param.data()[i];
            param.data_mut()[i] = p - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * p;
        }
        Ok(())
    }

    /// Stored first/second moments for one parameter, if any.
    pub fn moments_of(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Iterates stored moments in name order.
    pub fn iter_moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.moments
            .iter()
            .map(|(k, (m, v))| (k.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Installs moments for one parameter, replacing any present.
    pub fn restore_moments(&mut self, name: &str, m: Vec<T>, v: Vec<T>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::dim("moment vectors must have equal length"));
        }
        self.moments.insert(name.to_string(), (m, v));
        Ok(())
    }
}
