use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, position by position.
    pub fn check_congruent(&self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(shape_err!(
                "parameter sets differ in length: {} vs {}",
                self.len(),
                other.len()
            ));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb || a.shape() != b.shape() {
                return Err(shape_err!(
                    "parameter mismatch: {na} {:?} vs {nb} {:?}",
                    a.shape(),
                    b.shape()
                ));
            }
        }
        Ok(())
    }

    /// Register every tensor as a leaf of `g` (trainable iff `trainable`).
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Gradients of the registered leaves; zeros where no gradient flowed.
    pub fn collect_grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
