//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! are recorded in execution order, so node indices are already a topological
//! order and backward is a single reverse sweep. Gradients are accumulated in
//! that fixed order, which keeps repeated runs bitwise reproducible.

mod conv;
mod gradcheck;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use ops::{BatchNormStats, NormMode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ops::Op;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// # Panics
    /// If `var` was recorded on a different tape.
    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.value(var).grad()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<f64>> {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        self.nodes[var.index].value.take_grad()
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Propagates d(loss)/d(node) back to every reachable leaf that
    /// requires a gradient. Can run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        let shape = self.nodes[root].value.shape();
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(g)?;
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            self.nodes[i].op.backward(&self.nodes[i].value, &g, &mut sink);
        }
        Ok(())
    }
}

/// Accumulates input gradients for one backward step, skipping inputs that
/// do not lead to any trainable leaf.
struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl GradSink<'_> {
    fn wants(&self, index: usize) -> bool {
        self.nodes[index].needs_grad
    }

    fn value(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    /// Mutable gradient buffer for `index`, or `None` when not needed.
    fn buf(&mut self, index: usize) -> Option<&mut [f64]> {
        if !self.nodes[index].needs_grad {
            return None;
        }
        let n = self.nodes[index].value.numel();
        Some(self.grads[index].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add(&mut self, index: usize, contribution: impl IntoIterator<Item = f64>) {
        if let Some(buf) = self.buf(index) {
            for (acc, v) in buf.iter_mut().zip(contribution) {
                *acc += v;
            }
        }
    }
}
