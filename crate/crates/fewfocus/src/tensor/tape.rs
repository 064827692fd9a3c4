//! Operation tape for reverse-mode differentiation.

use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};

struct Node {
    name: &'static str,
    backward: Box<dyn Fn()>,
}

/// Records one backward closure per differentiable op, in execution order.
/// [`Tape::backward`] replays them in exact reverse order; gradients
/// accumulate additively across fan-out. Dropping or clearing the tape
/// releases every saved intermediate.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl Tape {
    /// Tape that records ops for a later backward pass.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// Tape that records nothing; forward passes through it never retain
    /// intermediates and their outputs never require grad.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded nodes and their saved intermediates, making the
    /// tape recordable again.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    pub(crate) fn record(&self, name: &'static str, backward: impl Fn() + 'static) {
        debug_assert!(self.recording);
        self.nodes.borrow_mut().push(Node {
            name,
            backward: Box::new(backward),
        });
    }

    /// Run reverse-mode accumulation from a scalar root: after the call,
    /// every `requires_grad` tensor reachable from `root` holds
    /// d(root)/d(tensor) in its grad buffer.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::usage(
                "backward called twice on the same tape; re-record the forward pass first",
            ));
        }
        if !root.shape().is_scalar() {
            return Err(Error::usage(format!(
                "backward root must be a scalar [1,1,1,1] tensor, got {}",
                root.shape()
            )));
        }
        if !root.requires_grad() {
            return Err(Error::usage(
                "backward root does not require grad (was it produced on this tape?)",
            ));
        }
        self.consumed.set(true);
        root.seed_grad_ones();
        for node in self.nodes.borrow().iter().rev() {
            (node.backward)();
        }
        Ok(())
    }

    /// Names of recorded ops, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.name).collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
