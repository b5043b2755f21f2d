//! Reverse-mode differentiation via a Wengert tape.
//!
//! Forward ops execute eagerly and record themselves on the tape; `backward`
//! replays the records in exact reverse execution order and accumulates
//! gradients into every leaf that requires them. The tape is confined to a
//! single thread (kernels may parallelize internally, but recording and
//! replay are sequential).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Backward rule for one recorded operation.
///
/// `inputs` and `needs` line up with the input ids the op was recorded with;
/// the returned vector holds one gradient contribution per input (`None`
/// where `needs` is false or the op is constant in that input). The engine
/// accumulates contributions, so rules never add into existing buffers.
pub trait TapeOp<S: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        out_grad: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>>;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<TensorId>,
    op: Option<Box<dyn TapeOp<S>>>,
    /// True for leaves the caller marked differentiable, and for every op
    /// node with at least one such ancestor.
    needs_grad: bool,
    grad: Option<Tensor<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    /// Register an input tensor. Parameters pass `requires_grad = true`;
    /// data tensors pass `false`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, needs_grad: requires_grad, grad: None });
        id
    }

    /// Record an executed op: its inputs, its already-computed output, and
    /// the backward rule. Rejects non-finite outputs, which is where NaN
    /// diagnostics get their op name from.
    pub fn record(&mut self, op: Box<dyn TapeOp<S>>, inputs: &[TensorId], output: Tensor<S>) -> Result<TensorId> {
        if !output.all_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value: output,
            inputs: inputs.to_vec(),
            op: Some(op),
            needs_grad,
            grad: None,
        });
        Ok(id)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient populated by the last `backward` call, if any reached `id`.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop gradients and re-arm `backward`. Values stay readable.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss. Populates `grad` for every
    /// differentiable leaf exactly once; calling twice without
    /// [`reset_grads`](Self::reset_grads) is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss { numel: loss_node.value.numel() });
        }
        if !loss_node.needs_grad {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;

        self.nodes[loss.0].grad = Some(Tensor::scalar(S::ONE));

        // Node ids are already topologically ordered (ops only reference
        // earlier ids), so one reverse pass visits ops in exact reverse
        // execution order.
        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_none() || self.nodes[i].grad.is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let inputs = node.inputs.clone();
            let needs: Vec<bool> = inputs.iter().map(|id| self.nodes[id.0].needs_grad).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let input_values: Vec<&Tensor<S>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let node = &self.nodes[i];
            let contributions = node.op.as_ref().unwrap().backward(
                &input_values,
                &node.value,
                node.grad.as_ref().unwrap(),
                &needs,
            );
            debug_assert_eq!(contributions.len(), inputs.len());
            for (idx, contribution) in contributions.into_iter().enumerate() {
                let Some(contribution) = contribution else { continue };
                let target = &mut self.nodes[inputs[idx].0];
                debug_assert_eq!(contribution.shape(), target.value.shape());
                match &mut target.grad {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += *c;
                        }
                    }
                    None => target.grad = Some(contribution),
                }
            }
        }
        Ok(())
    }
}
