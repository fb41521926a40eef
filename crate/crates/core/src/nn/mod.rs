//! Velocity model and its training machinery.
//!
//! [`UNet`] is a 3D encoder/decoder operating on `[N, C, D, H, W]` tensors;
//! [`optim`] provides AdamW with global-norm clipping plus an exponential
//! moving average of the weights; [`checkpoint`] persists all of it in one
//! self-describing file.

mod checkpoint;
mod optim;
mod unet;

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use optim::{optimizer_step, EmaState, OptimizerConfig, OptimizerState, StepOutcome};
pub use unet::{UNet, UNetConfig};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input spatial extents {extents:?} not divisible by {divisor}")]
    ExtentNotDivisible { extents: Vec<usize>, divisor: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Named parameter buffers in a stable insertion order.
///
/// Iteration order is construction order, which fixes the layout of
/// optimizer state, EMA shadows, and checkpoint records.
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a buffer; the tensor is marked as requiring gradients.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.requires_grad());
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))]
    }

    pub fn replace_at(&mut self, i: usize, tensor: Tensor<T>) {
        self.tensors[i] = tensor.requires_grad();
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Total scalar count across all buffers.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) {
        for t in &self.tensors {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::<f32>::new();
        p.insert("b", Tensor::zeros(vec![2]));
        p.insert("a", Tensor::zeros(vec![3]));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.numel(), 5);
        assert!(p.get("a").needs_grad());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![1]));
        p.insert("w", Tensor::zeros(vec![1]));
    }
}
