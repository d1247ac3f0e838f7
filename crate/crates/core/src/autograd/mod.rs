//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so backward is a single reverse sweep. Values are held
//! behind `Rc` so backward functions can read saved inputs without copying.

mod conv;
mod gradcheck;
mod norm;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub use conv::{conv2d_output_size, conv_transpose2d_output_size};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport};
pub use norm::{BatchStats, NormMode};

/// Backward rule for one recorded operation.
///
/// `inputs` are the values of the operation's inputs, in recording order,
/// and `output` is the value the operation produced. Returns one optional
/// gradient per input; `None` means "no contribution".
pub(crate) trait BackwardOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[Rc<Tensor>], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Rc<dyn BackwardOp>>,
    grad: Option<Tensor>,
}

/// Ordered record of operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&self, value: Tensor) -> DiffTensor<'_> {
        self.push(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is accumulated by [`DiffTensor::backward`].
    pub fn param(&self, value: Tensor) -> DiffTensor<'_> {
        self.push(value, true, Vec::new(), None)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> DiffTensor<'_> {
        self.push(value, requires_grad, Vec::new(), None)
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        inputs: &[DiffTensor<'_>],
        op: impl BackwardOp + 'static,
    ) -> DiffTensor<'_> {
        let ids: Vec<usize> = inputs.iter().map(|t| t.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(value, true, ids, Some(Rc::new(op)))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    fn push(
        &self,
        value: Tensor,
        requires_grad: bool,
        inputs: Vec<usize>,
        op: Option<Rc<dyn BackwardOp>>,
    ) -> DiffTensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs,
            op,
            grad: None,
        });
        DiffTensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        {
            let mut nodes = self.nodes.borrow_mut();
            let node = &mut nodes[root];
            if !node.value.is_scalar() {
                return Err(invalid(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    node.value.shape()
                )));
            }
            if !node.requires_grad {
                return Ok(());
            }
            node.grad = Some(Tensor::ones(node.value.shape().to_vec()));
        }
        for id in (0..=root).rev() {
            let (op, inputs, input_values, output, grad) = {
                let mut nodes = self.nodes.borrow_mut();
                let node = &mut nodes[id];
                let Some(op) = node.op.clone() else { continue };
                // Interior gradients are consumed here; only leaves keep theirs.
                let Some(grad) = node.grad.take() else { continue };
                let inputs = node.inputs.clone();
                let output = node.value.clone();
                let input_values: Vec<Rc<Tensor>> = inputs.iter().map(|&i| nodes[i].value.clone()).collect();
                (op, inputs, input_values, output, grad)
            };
            let grads = op.backward(&input_values, &output, &grad);
            debug_assert_eq!(grads.len(), inputs.len(), "{} returned wrong arity", op.name());
            let mut nodes = self.nodes.borrow_mut();
            for (input, g) in inputs.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                let node = &mut nodes[input];
                if !node.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), node.value.shape(), "{} grad shape", op.name());
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct DiffTensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for DiffTensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffTensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<'t> DiffTensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, present only for leaves reached by backward.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Scalar value; panics on non-scalar tensors.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert!(v.is_scalar(), "item() on tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    /// Propagates gradients from this scalar to every leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(vec![2]));
        assert!(x.square().backward().is_err());
    }

    #[test]
    fn constants_never_accumulate() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(vec![2]));
        let c = tape.constant(Tensor::full(vec![2], 3.0));
        x.mul(c).unwrap().sum().backward().unwrap();
        assert!(c.grad().is_none());
        assert!(!c.requires_grad());
        assert_eq!(x.grad().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        // x*x + x -> 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[7.0]);
    }
}
