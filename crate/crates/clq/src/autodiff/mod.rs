//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! Tensors are 64-bit, shapes are explicit, and the graph is a DAG of
//! `Rc` handles built per forward pass and dropped afterwards. Backward
//! walks the graph once in reverse topological order and accumulates
//! into the `grad` buffer of every reachable tensor, so repeated
//! `backward` calls without a reset add up.

mod conv;
pub mod gradcheck;
mod ops;
pub mod optim;

pub use gradcheck::grad_check;
pub use optim::{ParamSet, Parameter};

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Dense multi-dimensional value node; cloning shares the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn new(shape: Vec<usize>, values: Vec<f64>, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor from explicit shape and values.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "from_values",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(Tensor::new(shape.to_vec(), values, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![], vec![v], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)], None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(shape.to_vec(), vec![v; numel(shape)], None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.shape.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.inner.values.borrow()[0]
    }

    /// Overwrite a leaf's storage in place (optimizer steps, finite
    /// differences). The graph above, if any, is stale afterwards.
    pub fn set_values(&self, values: &[f64]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values length mismatch");
        v.copy_from_slice(values);
    }

    pub fn set_value_at(&self, idx: usize, v: f64) {
        self.inner.values.borrow_mut()[idx] = v;
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.values.borrow()[idx]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Constant copy: same values, no parents, no gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.shape.clone(), self.values(), None)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode backward from a scalar loss. Populates `grad` on all
    /// reachable tensors; calling again without zeroing accumulates.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.inner.shape.clone(),
            });
        }

        // Iterative postorder DFS: parents precede children in `order`.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for parent in op.parents() {
                    if !visited.contains(&parent.id()) {
                        stack.push((parent, false));
                    }
                }
            }
        }

        // Per-call gradient table so that a second backward re-propagates
        // only its own seed; stored grads accumulate across calls.
        let mut table: std::collections::HashMap<u64, Vec<f64>> = std::collections::HashMap::new();
        table.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = table.remove(&node.id()) else {
                continue;
            };
            node.accumulate_grad(&g);
            if let Some(op) = &node.inner.op {
                let out_values = node.inner.values.borrow();
                op.backward(&node.inner.shape, &out_values, &g, &mut table);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::from_values(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_values(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_square_gradient() {
        // loss = mean(x^2) at x=[1,2]: grad = 2x/2 = [1, 2]
        let x = Tensor::from_values(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().mean_all();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = sum(x*x + x): d/dx = 2x + 1
        let x = Tensor::from_values(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip([0.5, -1.0, 2.0]) {
            assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::from_values(&[2], vec![1.0, 1.0]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::from_values(&[2], vec![2.0, 3.0]).unwrap();
        let d = x.detach();
        let loss = x.mul(&d).unwrap().sum_all();
        loss.backward().unwrap();
        // only the direct factor contributes: grad = d = x values
        assert_eq!(x.grad().unwrap(), vec![2.0, 3.0]);
    }
}
