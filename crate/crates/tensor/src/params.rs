use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameters in deterministic (lexicographic path) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

/// Map from parameter path to the tape variable it was recorded as.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Builds bindings from explicit `(path, var)` pairs, e.g. when the
    /// parameters were recorded by a gradient checker.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(path.to_string()))
    }

    pub fn merge(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a trainable parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(TensorError::Invalid(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, t.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(path)
            .ok_or_else(|| TensorError::UnknownParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParameter(path.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParameterSet<T>) -> Result<()> {
        for (k, v) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(TensorError::Invalid(format!("duplicate parameter path `{k}`")));
            }
            self.entries.insert(k, v);
        }
        Ok(())
    }

    /// Sets `requires_grad` on every path for which `pred` holds and clears
    /// it elsewhere. Frozen entries are recorded as constants and skipped
    /// by the optimizer.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (k, v) in self.entries.iter_mut() {
            v.set_requires_grad(pred(k));
            v.zero_grad();
        }
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings {
            vars: self.entries.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect(),
        }
    }

    /// Copies gradients computed by `backward` into the parameters' grad
    /// buffers. Trainable parameters that did not influence the loss get an
    /// explicit zero gradient.
    pub fn absorb(&mut self, bindings: &Bindings, grads: &Gradients<T>) -> Result<()> {
        for (path, var) in bindings.iter() {
            let Some(t) = self.entries.get_mut(path) else {
                continue;
            };
            if !t.requires_grad() {
                continue;
            }
            match grads.get(var) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }

    /// Overwrites values from `other` for every shared path, checking shapes.
    pub fn load_values(&mut self, other: &ParameterSet<T>) -> Result<()> {
        for (k, v) in other.iter() {
            let dst = self.get_mut(k)?;
            if dst.shape() != v.shape() {
                return Err(shape_err("load_values", "parameter shape", format!("`{k}`: {:?} vs {:?}", dst.shape(), v.shape())));
            }
            dst.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Keeps only the entries whose path satisfies `pred`.
    pub fn filtered(&self, pred: impl Fn(&str) -> bool) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| pred(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}
