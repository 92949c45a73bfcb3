use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{NodeRef, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Vector-Jacobian product of one recorded operation.
///
/// Receives the gradient of the op output and a mask of which inputs need a
/// gradient; returns one optional gradient per input, in input order.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    len: usize,
}

#[derive(Default)]
struct State {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of differentiable operations.
///
/// Topological order is append order, so backward is a single reverse sweep.
/// After [`Tape::backward`] the tape refuses further use until
/// [`Tape::reset`] is called; tensors recorded before a reset are rejected.
pub struct Tape {
    id: Cell<u64>,
    recording: bool,
    state: RefCell<State>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: Cell::new(fresh_id()),
            recording: true,
            state: RefCell::default(),
        }
    }

    /// A tape that never records; every op is evaluated eagerly.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes; handles from the previous generation become invalid.
    pub fn reset(&self) {
        let mut state = self.state.borrow_mut();
        state.nodes.clear();
        state.consumed = false;
        self.id.set(fresh_id());
    }

    /// Registers `t` as a differentiable leaf on this tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let mut out = t.detach();
        if self.recording {
            let mut state = self.state.borrow_mut();
            let index = state.nodes.len();
            state.nodes.push(Node {
                op: "leaf",
                inputs: Vec::new(),
                backward: None,
                len: t.numel(),
            });
            out.node = Some(NodeRef {
                tape: self.id.get(),
                index,
            });
        }
        out
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        if self.state.borrow().consumed {
            return Err(Error::Usage(
                "tape already consumed by backward; call reset() before reuse".into(),
            ));
        }
        Ok(())
    }

    fn resolve(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(node) if node.tape == self.id.get() => Ok(Some(node.index)),
            Some(_) => Err(Error::Usage(
                "tensor belongs to a different tape or a reset generation".into(),
            )),
        }
    }

    /// Wraps an already-computed output, attaching a node when any input is tracked.
    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Tensor> {
        self.record_shared(op, inputs, shape, Arc::new(data), backward)
    }

    pub(crate) fn record_shared(
        &self,
        op: &'static str,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Tensor> {
        self.check_live()?;
        let mut out = Tensor::from_parts(shape, data);
        if !self.recording {
            return Ok(out);
        }
        let mut indices = Vec::with_capacity(inputs.len());
        for t in inputs {
            indices.push(self.resolve(t)?);
        }
        if indices.iter().all(Option::is_none) {
            return Ok(out);
        }
        let mut state = self.state.borrow_mut();
        let index = state.nodes.len();
        state.nodes.push(Node {
            op,
            // Untracked inputs point at a sentinel and never receive gradient.
            inputs: indices.into_iter().map(|i| i.unwrap_or(usize::MAX)).collect(),
            backward: Some(Box::new(backward)),
            len: out.numel(),
        });
        out.node = Some(NodeRef {
            tape: self.id.get(),
            index,
        });
        Ok(out)
    }

    /// Reverse sweep from a scalar loss. Returns gradients of every watched leaf.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        self.check_live()?;
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = self.resolve(loss)?.ok_or_else(|| {
            Error::Usage("loss does not depend on any watched tensor".into())
        })?;

        let mut state = self.state.borrow_mut();
        state.consumed = true;
        let nodes = &state.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        for index in (0..=root).rev() {
            let node = &nodes[index];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            debug_assert_eq!(upstream.len(), node.len, "{} gradient length", node.op);
            let needs: Vec<bool> = node.inputs.iter().map(|&i| i != usize::MAX).collect();
            let input_grads = backward(&upstream, &needs);
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                let (true, Some(grad)) = (input != usize::MAX, grad) else {
                    continue;
                };
                debug_assert_eq!(grad.len(), nodes[input].len, "{} input gradient", node.op);
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        Ok(Gradients {
            tape: self.id.get(),
            grads,
        })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a watched tensor, or `None` when
    /// the tensor was not watched on this tape.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        let grad = match self.grads.get(node.index)? {
            Some(g) => g.clone(),
            None => vec![0.0; t.numel()],
        };
        Some(Tensor::from_parts(t.shape().to_vec(), Arc::new(grad)))
    }

    /// Like [`get`](Self::get) but disconnected or unwatched tensors yield zeros.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}
