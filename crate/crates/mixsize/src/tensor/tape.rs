//! Execution tape for reverse-mode differentiation.

use std::cell::RefCell;

use crate::elem::Elem;
use crate::tensor::Tensor;
use crate::{Error, Result};

type BackwardFn = Box<dyn FnOnce()>;

/// Ordered record of executed ops. Ops append themselves during the forward
/// pass; [`Tape::backward`] replays the record once, in reverse execution
/// order, which is a valid topological order by construction.
pub struct Tape {
    recording: bool,
    entries: RefCell<Vec<BackwardFn>>,
}

impl Tape {
    /// A recording tape for a training step.
    pub fn new() -> Self {
        Tape {
            recording: true,
            entries: RefCell::new(Vec::new()),
        }
    }

    /// A no-op tape for inference paths; nothing is recorded.
    pub fn inactive() -> Self {
        Tape {
            recording: false,
            entries: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    pub(crate) fn push(&self, f: BackwardFn) {
        debug_assert!(self.recording);
        self.entries.borrow_mut().push(f);
    }

    /// Run the backward pass from a scalar loss, accumulating into the grad
    /// buffers of every reachable tensor. Consumes the tape, so one forward
    /// record is differentiated exactly once; grads from successive tapes
    /// accumulate until explicitly zeroed.
    pub fn backward<T: Elem>(self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(crate::domain_err!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            ));
        }
        if !self.recording {
            return Err(Error::Domain(
                "backward called on an inactive tape".to_string(),
            ));
        }
        loss.seed_grad_ones();
        let entries = self.entries.into_inner();
        for f in entries.into_iter().rev() {
            f();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
