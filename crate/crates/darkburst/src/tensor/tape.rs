//! Reverse pass: topological ordering and gradient accumulation.
//!
//! The graph is already present in the tensors themselves (every
//! computed tensor holds handles to its inputs), so "recording a tape"
//! means collecting the reachable tensors from the loss in dependency
//! order. The backward walk then visits them in reverse, asking each
//! operation to route its output gradient into its inputs. A tensor
//! consumed by several operations receives the sum of all incoming
//! contributions, which makes the whole pass linear: the gradient of a
//! weighted sum of losses is the weighted sum of the gradients.

use super::ops::backward_op;
use super::{Node, Tensor};
use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};

/// Gradients keyed by tensor identity, as produced by [`backward`].
pub struct GradMap {
    grads: HashMap<u64, Tensor>,
}

impl GradMap {
    /// Gradient for `t` if it was reached by the backward pass.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    /// Gradient for `t`, or zeros when the loss does not depend on it.
    pub fn grad(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()).expect("gradient shape is valid"),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Working buffers for the backward walk, handed to each op rule.
pub(crate) struct Accum {
    bufs: HashMap<u64, Vec<f64>>,
}

impl Accum {
    /// Runs `f` on the gradient buffer of `t`, creating it zeroed on
    /// first touch. Untracked tensors are skipped entirely, which is
    /// what stops gradient flow at constants.
    pub fn with(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        if !t.is_tracked() {
            return;
        }
        let buf = self
            .bufs
            .entry(t.id())
            .or_insert_with(|| vec![0.0; t.numel()]);
        f(buf);
    }

    pub fn add_slice(&mut self, t: &Tensor, contribution: &[f64]) {
        self.with(t, |g| {
            for (g, &c) in g.iter_mut().zip(contribution) {
                *g += c;
            }
        });
    }

    /// Variant for ops with three distinct inputs whose backward
    /// kernel fills all requested buffers in one call (convolutions).
    /// Buffers for untracked inputs are passed as `None`. The buffers
    /// are lifted out of the map for the duration of the call, so the
    /// three mutable borrows never alias.
    pub fn with3(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        f: impl FnOnce(Option<&mut [f64]>, Option<&mut [f64]>, Option<&mut [f64]>),
    ) {
        debug_assert!(a.id() != b.id() && b.id() != c.id() && a.id() != c.id());
        let mut take = |t: &Tensor| {
            if t.is_tracked() {
                Some(
                    self.bufs
                        .remove(&t.id())
                        .unwrap_or_else(|| vec![0.0; t.numel()]),
                )
            } else {
                None
            }
        };
        let mut ga = take(a);
        let mut gb = take(b);
        let mut gc = take(c);
        f(ga.as_deref_mut(), gb.as_deref_mut(), gc.as_deref_mut());
        for (t, g) in [(a, ga), (b, gb), (c, gc)] {
            if let Some(g) = g {
                self.bufs.insert(t.id(), g);
            }
        }
    }
}

/// The reachable computation history of one scalar loss, in
/// dependency order (inputs always precede their consumers).
pub struct Tape {
    order: Vec<Tensor>,
    loss: Tensor,
}

impl Tape {
    /// Collects the graph under `loss`. Fails if the loss is not a
    /// tracked scalar or is non-finite.
    pub fn trace(loss: &Tensor) -> Result<Tape> {
        let v = loss.item()?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss is {v}")));
        }
        if !loss.is_tracked() {
            return Err(Error::shape(
                "loss does not depend on any tracked tensor; nothing to differentiate",
            ));
        }
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative post-order so graph depth cannot overflow the
        // call stack.
        let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Node::Computed(op) = t.node() {
                for input in op_inputs(op) {
                    if input.is_tracked() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Ok(Tape {
            order,
            loss: loss.clone(),
        })
    }

    /// Number of tensors participating in the traced computation.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Runs the reverse sweep and returns gradients for every tracked
    /// leaf and intermediate reached from the loss.
    pub fn run_backward(&self) -> Result<GradMap> {
        let mut acc = Accum {
            bufs: HashMap::new(),
        };
        acc.bufs.insert(self.loss.id(), vec![1.0]);
        for t in self.order.iter().rev() {
            let Some(grad_out) = acc.bufs.remove(&t.id()) else {
                continue;
            };
            backward_op(t, &grad_out, &mut acc);
            // Leaves keep their buffer; interior nodes are finished
            // and theirs can be dropped, except we still need the
            // gradient tensor if a caller asks for an intermediate.
            acc.bufs.insert(t.id(), grad_out);
        }
        let mut grads = HashMap::new();
        for t in &self.order {
            if let Some(buf) = acc.bufs.remove(&t.id()) {
                grads.insert(t.id(), Tensor::constant(t.shape(), buf)?);
            }
        }
        Ok(GradMap { grads })
    }
}

fn op_inputs(op: &super::Op) -> Vec<&Tensor> {
    use super::Op::*;
    match op {
        Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
        Scale(a, _) | LeakyRelu(a, _) | Sigmoid(a) | Clamp01(a) | Abs(a) | Ln(a) | Sum(a)
        | Mean(a) | MaxPool2d(a, _) | GlobalAvgPool(a) | BilinearHalf(a) | BilinearDouble(a)
        | DepthToSpace(a) => vec![a],
        Concat(parts, _) | SetMax(parts, _) => parts.iter().collect(),
        Conv2d { input, kernel, bias, .. } | ConvT2d { input, kernel, bias } => {
            vec![input, kernel, bias]
        }
        ScaleChannels { input, gate } => vec![input, gate],
        GatherPositions { input, .. } => vec![input],
        CxSim { pred, .. } => vec![pred],
    }
}

/// Traces the graph under a scalar loss and runs the reverse sweep.
pub fn backward(loss: &Tensor) -> Result<GradMap> {
    Tape::trace(loss)?.run_backward()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::concat;

    fn var(data: &[f64]) -> Tensor {
        Tensor::variable(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn linear_objective_recovers_coefficients() {
        let w = var(&[0.5, -1.0, 2.0]);
        let x = Tensor::constant(&[3], vec![3.0, 4.0, 5.0]).unwrap();
        let loss = w.mul(&x).unwrap().sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad(&w).data(), x.data());
        // Constants collect no gradient entry at all.
        assert!(grads.get(&x).is_none());
    }

    #[test]
    fn reused_input_accumulates_both_paths() {
        let x = var(&[1.5, -2.0]);
        let loss = x.add(&x).unwrap().sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad(&x).data(), &[2.0, 2.0]);
        let y = var(&[3.0]);
        let loss = y.mul(&y).unwrap().sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad(&y).data(), &[6.0]);
    }

    #[test]
    fn diamond_graph_traced_once_per_node() {
        let x = var(&[1.0, 2.0]);
        let s = x.scale(2.0);
        let loss = s.add(&s).unwrap().sum();
        let tape = Tape::trace(&loss).unwrap();
        // Nodes: x, s, add, sum. The shared branch appears once.
        assert_eq!(tape.len(), 4);
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad(&x).data(), &[4.0, 4.0]);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = var(&[2.0, 3.0]);
        let w = var(&[10.0, 20.0]);
        let loss = x.detach().mul(&w).unwrap().sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad(&w).data(), &[2.0, 3.0]);
        assert!(grads.get(&x).is_none());
        assert!(grads.grad(&x).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn untouched_variable_reads_back_zeros() {
        let x = var(&[1.0]);
        let unused = var(&[5.0, 6.0]);
        let loss = x.mul(&x).unwrap().sum();
        let grads = backward(&loss).unwrap();
        let g = grads.grad(&unused);
        assert_eq!(g.shape(), unused.shape());
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let x = var(&[0.3, -0.7, 1.1]);
        let base = x.mul(&x).unwrap().sum();
        let scaled = x.mul(&x).unwrap().sum().scale(2.5);
        let g1 = backward(&base).unwrap();
        let g2 = backward(&scaled).unwrap();
        for (a, b) in g1.grad(&x).data().iter().zip(g2.grad(&x).data()) {
            assert!((a * 2.5 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked_losses() {
        let x = var(&[1.0, 2.0]);
        let vec_out = x.scale(2.0);
        assert!(backward(&vec_out).is_err());
        let c = Tensor::constant(&[1], vec![4.0]).unwrap();
        assert!(backward(&c).is_err());
        assert!(backward(&c.scale(2.0)).is_err());
    }

    #[test]
    fn two_backward_passes_are_independent() {
        let x = var(&[2.0]);
        let l1 = x.mul(&x).unwrap().sum();
        let l2 = x.scale(3.0).sum();
        let g1 = backward(&l1).unwrap();
        let g2 = backward(&l2).unwrap();
        assert_eq!(g1.grad(&x).data(), &[4.0]);
        assert_eq!(g2.grad(&x).data(), &[3.0]);
    }

    #[test]
    fn concat_routes_gradients_to_each_part() {
        let a = Tensor::variable(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::variable(&[1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let joined = concat(&[a.clone(), b.clone()], 1).unwrap();
        let weights = Tensor::constant(&[1, 3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = joined.mul(&weights).unwrap().sum();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad(&a).data(), &[1.0, 2.0]);
        assert_eq!(grads.grad(&b).data(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
