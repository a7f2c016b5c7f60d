//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable f64 buffer plus a shape, shared behind
//! an `Arc` so clones are cheap handles. Every differentiable
//! operation records how its output was computed (the operation kind
//! and handles to its inputs) directly on the output tensor. The
//! recording is skipped when no input is tracked, so inference on
//! detached parameters builds no graph at all.
//!
//! Calling [`backward`](tape::backward) on a scalar loss walks the
//! recorded operations in reverse topological order and accumulates a
//! gradient for every reachable variable. [`grad_check`] verifies any
//! scalar-valued function against central finite differences.
//!
//! All arithmetic is performed in f64. The only sources of
//! nondeterminism this rules in are the ones we control: summations
//! run in a fixed order, and max-style operations break ties by first
//! occurrence, so identical inputs always produce bit-identical
//! outputs.

mod conv;
mod cx;
mod grad_check;
mod ops;
mod tape;
#[cfg(test)]
pub(crate) mod testutil;

pub use cx::CxNorm;
pub use grad_check::{grad_check, grad_check_multi};
pub use ops::{concat, set_max};
pub use tape::{backward, GradMap, Tape};

pub(crate) use ops::Op;

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// How a tensor participates in differentiation.
pub(crate) enum Node {
    /// Plain data; gradients neither flow into nor through it.
    Constant,
    /// A leaf that accumulates a gradient (network parameters, or the
    /// probe input of a gradient check).
    Variable,
    /// Produced by a recorded operation; holds handles to its inputs.
    Computed(Op),
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Node,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, node: Node) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::shape(format!("empty tensor shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor of shape {shape:?}"
        );
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                node,
            }),
        })
    }

    /// Untracked tensor from raw data.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), data, Node::Constant)
    }

    /// Gradient-accumulating leaf (a trainable parameter).
    pub fn variable(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), data, Node::Variable)
    }

    pub(crate) fn computed(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Tensor> {
        Tensor::new(shape, data, Node::Computed(op))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel = shape.iter().product();
        Tensor::constant(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let numel = shape.iter().product();
        Tensor::constant(shape, vec![value; numel])
    }

    /// Rank-1 single-element tensor, the carrier for loss values.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::constant(&[1], vec![value]).expect("scalar is a valid tensor")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn node(&self) -> &Node {
        &self.inner.node
    }

    /// True when gradients flow into or through this tensor.
    pub fn is_tracked(&self) -> bool {
        !matches!(self.inner.node, Node::Constant)
    }

    pub fn is_variable(&self) -> bool {
        matches!(self.inner.node, Node::Variable)
    }

    /// Same values, detached from the graph. Shares nothing with the
    /// original besides copied data; used to freeze parameters and to
    /// cut gradient flow through loss targets.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(&self.inner.shape, self.inner.data.clone())
            .expect("detach of a valid tensor")
    }

    /// Extracts the value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Interprets the shape as `[n, c, h, w]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape()
            ))),
        }
    }

    /// Interprets the shape as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape()
            ))),
        }
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// True when both tensors hold bit-identical values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
