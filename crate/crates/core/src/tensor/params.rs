use indexmap::IndexMap;

use super::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: DenseArray,
    pub grad: DenseArray,
    /// Power-iteration vector for spectrally normalized weight matrices.
    pub sn_u: Option<Vec<f64>>,
    grad_ready: bool,
}

impl Parameter {
    pub fn grad_ready(&self) -> bool {
        self.grad_ready
    }
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: DenseArray,
        sn_u: Option<Vec<f64>>,
    ) -> Result<()> {
        let name = name.into();
        if let Some(u) = &sn_u {
            if value.shape().len() != 2 || u.len() != value.rows() {
                return Err(Error::dim(format!(
                    "{name}: sn vector length {} vs rows {}",
                    u.len(),
                    value.rows()
                )));
            }
        }
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let grad = DenseArray::zeros(value.shape());
        self.entries.insert(
            name,
            Parameter {
                value,
                grad,
                sn_u,
                grad_ready: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&DenseArray> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Add into the gradient of `name` and mark it populated.
    pub fn accumulate_grad(&mut self, name: &str, grad: &DenseArray) -> Result<()> {
        let p = self.get_mut(name)?;
        p.grad.add_assign(grad)?;
        p.grad_ready = true;
        Ok(())
    }

    pub fn set_grad(&mut self, name: &str, grad: DenseArray) -> Result<()> {
        let p = self.get_mut(name)?;
        if !p.grad.same_shape(&grad) {
            return Err(Error::dim(format!(
                "{name}: gradient shape {:?}",
                grad.shape()
            )));
        }
        p.grad = grad;
        p.grad_ready = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            p.grad_ready = false;
        }
    }

    /// Mark every gradient populated, e.g. when an entry received no signal.
    pub fn mark_all_grads_ready(&mut self) {
        for p in self.entries.values_mut() {
            p.grad_ready = true;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Locate flat coordinate `idx` across all entries in order.
    pub(crate) fn locate(&self, mut idx: usize) -> Option<(usize, usize)> {
        for (e, p) in self.entries.values().enumerate() {
            if idx < p.value.len() {
                return Some((e, idx));
            }
            idx -= p.value.len();
        }
        None
    }

    pub(crate) fn entry_at_mut(&mut self, e: usize) -> &mut Parameter {
        &mut self.entries[e]
    }

    pub(crate) fn entry_at(&self, e: usize) -> &Parameter {
        &self.entries[e]
    }

    /// Sum of squared values over all entries.
    pub fn squared_norm(&self) -> f64 {
        self.entries.values().map(|p| p.value.frobenius_sq()).sum()
    }
}
