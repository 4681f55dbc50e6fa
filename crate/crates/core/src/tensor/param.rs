use indexmap::IndexMap;

use super::Tensor;
use crate::error::{invalid, Result};

/// Named trainable leaves in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf under a unique path.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if !tensor.is_leaf() || !tensor.requires_grad() {
            return invalid("ParamSet::insert", format!("{path} is not a trainable leaf"));
        }
        if self.entries.contains_key(&path) {
            return invalid("ParamSet::insert", format!("duplicate parameter path {path}"));
        }
        if self.entries.values().any(|t| std::rc::Rc::ptr_eq(&t.0, &tensor.0)) {
            return invalid("ParamSet::insert", format!("{path} aliases an existing parameter"));
        }
        self.entries.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }

    /// Gradient of every parameter; leaves the loss never reached get exact zeros.
    pub fn gradients(&self) -> IndexMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(k, t)| (k.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }
}

/// Runs the reverse pass from `loss` and returns the resulting gradient map.
pub fn backward(loss: &Tensor, params: &ParamSet) -> Result<IndexMap<String, Vec<f64>>> {
    loss.backward()?;
    Ok(params.gradients())
}
