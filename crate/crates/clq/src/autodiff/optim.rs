//! Named parameters and plain SGD with momentum and weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Tensor;

/// A leaf tensor registered under a unique name, with its momentum buffer.
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub momentum: Vec<f64>,
}

/// Ordered parameter registry; iteration order is registration order, so
/// updates are deterministic.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a leaf tensor and get back a shared handle to it.
    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let handle = tensor.clone();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            momentum: vec![0.0; tensor.len()],
            tensor,
        });
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// v <- momentum*v + grad + weight_decay*w;  w <- w - lr*v.
    /// Missing gradients count as zero. Gradients are cleared afterwards.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for p in self.params.iter_mut() {
            let grad = p.tensor.grad();
            let mut w = p.tensor.values();
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + weight_decay * w[i];
                p.momentum[i] = momentum * p.momentum[i] + g;
                w[i] -= lr * p.momentum[i];
            }
            p.tensor.set_values(&w);
            p.tensor.zero_grad();
        }
    }

    /// Plain copy of all parameter values; safe to move across threads.
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.values()))
            .collect()
    }

    /// Load values by name; shapes must match the registered tensors.
    pub fn load_snapshot(&mut self, snapshot: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, shape, values) in snapshot {
            let Some(&i) = self.index.get(name) else {
                return Err(Error::Checkpoint(format!("unknown parameter {name:?}")));
            };
            let p = &self.params[i];
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} shape {:?} does not match checkpoint {:?}",
                    p.tensor.shape(),
                    shape
                )));
            }
            p.tensor.set_values(values);
        }
        Ok(())
    }
}
