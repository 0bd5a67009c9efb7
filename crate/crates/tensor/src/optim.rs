use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParameterSet;
use crate::real::Real;

/// Bias-corrected Adam moments plus hyper-parameters. `step` counts calls
/// to [`Adam::step`]; `counts` holds the number of updates each parameter
/// has received, which drives its bias correction (parameters that start
/// training late are corrected from their own first update).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
    pub counts: BTreeMap<String, u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }
}

/// Adam optimizer over the trainable entries of a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            state: AdamState::new(lr),
        }
    }

    pub fn from_state(state: AdamState<T>) -> Self {
        Self { state }
    }

    /// One update. Every trainable parameter must carry a gradient; the
    /// gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut ParameterSet<T>) -> Result<()> {
        for (path, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(TensorError::MissingGradient(path.to_string()));
            }
        }
        let s = &mut self.state;
        s.step += 1;
        let (b1, b2) = (s.beta1, s.beta2);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let eps = T::of(s.eps);
        for (path, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let count = s.counts.entry(path.to_string()).or_insert(0);
            *count += 1;
            let bc1 = 1.0 - b1.powi(*count as i32);
            let bc2 = 1.0 - b2.powi(*count as i32);
            let step_size = T::of(s.lr / bc1);
            let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
            let n = t.numel();
            let g = t.grad().expect("checked above").to_vec();
            let m = s.first.entry(path.to_string()).or_insert_with(|| vec![T::zero(); n]);
            let v = s.second.entry(path.to_string()).or_insert_with(|| vec![T::zero(); n]);
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + one_b1 * gi;
                *vi = b2t * *vi + one_b2 * gi * gi;
                *p -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
