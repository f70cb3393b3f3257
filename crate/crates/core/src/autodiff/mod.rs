//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every differentiable op whose inputs depend on a
//! variable created with [`Tape::var`]. Values live in [`Var`] handles;
//! [`Tape::backward`] replays the record in reverse once and returns the
//! gradients of the leaf variables.
//!
//! A tape built with [`Tape::no_grad`] records nothing and is what inference
//! uses. A tape is confined to one thread.

mod check;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use check::{grad_check, grad_check_many, relative_error};
pub(crate) use ops::Op;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    tape: u64,
    generation: u32,
    id: usize,
}

/// A value on a tape. Cloning is cheap: the tensor is shared.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar = f64> {
    value: Arc<Tensor<T>>,
    node: Option<NodeRef>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Option<usize>>,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    generation: u32,
    consumed: bool,
}

pub struct Tape<T: Scalar = f64> {
    id: u64,
    recording: bool,
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that never records; every op just computes its value.
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                generation: 0,
                consumed: false,
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return self.constant(value);
        }
        let node = self.push(Op::Leaf, Vec::new());
        Var {
            value: Arc::new(value),
            node: Some(node),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    /// Drop everything recorded so far. Variables created before the reset
    /// must not be used with this tape again.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
        inner.generation += 1;
    }

    fn push(&self, op: Op<T>, inputs: Vec<Option<usize>>) -> NodeRef {
        let mut inner = self.inner.borrow_mut();
        assert!(
            !inner.consumed,
            "tape was already differentiated; call reset() before recording again"
        );
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, inputs });
        NodeRef {
            tape: self.id,
            generation: inner.generation,
            id,
        }
    }

    fn node_of(&self, v: &Var<T>) -> Option<usize> {
        let r = v.node?;
        let generation = self.inner.borrow().generation;
        assert!(
            r.tape == self.id && r.generation == generation,
            "variable belongs to a different tape or predates a reset"
        );
        Some(r.id)
    }

    /// Wrap a computed value, recording `op` when any input is tracked.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        op: impl FnOnce() -> Op<T>,
    ) -> Var<T> {
        let ids: Vec<Option<usize>> = if self.recording {
            inputs.iter().map(|v| self.node_of(v)).collect()
        } else {
            Vec::new()
        };
        let node = if ids.iter().any(Option::is_some) {
            Some(self.push(op(), ids))
        } else {
            None
        };
        Var {
            value: Arc::new(value),
            node,
        }
    }

    /// Differentiate the scalar `loss` with respect to every leaf it depends
    /// on. Consumes the record; a second call needs [`Tape::reset`] first.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Backward(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let root = match loss.node {
            Some(r) if r.tape == self.id && r.generation == inner.generation => r.id,
            Some(_) => {
                return Err(Error::Backward(
                    "loss belongs to a different tape or predates a reset".into(),
                ))
            }
            None => {
                return Err(Error::Backward(
                    "loss does not depend on any variable".into(),
                ))
            }
        };
        inner.consumed = true;
        let mut nodes = std::mem::take(&mut inner.nodes);
        let generation = inner.generation;
        drop(inner);

        nodes.truncate(root + 1);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(loss.shape().to_vec()));
        let mut leaves = HashMap::new();
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = node.op.backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(iid), Some(ig)) = (*input, ig) {
                    match &mut grads[iid] {
                        Some(acc) => acc.add_assign_tensor(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            generation,
            leaves,
        })
    }
}

/// Gradients of leaf variables, keyed by the variable handle.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    tape: u64,
    generation: u32,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is untracked or the loss does not depend on it.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        let r = v.node?;
        if r.tape != self.tape || r.generation != self.generation {
            return None;
        }
        self.leaves.get(&r.id)
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `v` when there
    /// is no gradient.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
