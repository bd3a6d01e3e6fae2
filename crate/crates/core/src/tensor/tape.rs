use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{Array, Scalar};
use crate::error::{Error, Result};

/// Backward rule: receives the output gradient and, per input, whether that
/// input needs a gradient. Returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Array<T>, &[bool]) -> Vec<Option<Array<T>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Vec<usize>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Array<T>>,
    consumed: bool,
}

/// Define-by-run recording of differentiable operations.
///
/// Node ids are assigned in recording order, which is also a topological
/// order of the graph; backward walks them in reverse.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaf_grads: HashMap::new(),
                consumed: false,
            })),
        }
    }

    /// Registers a leaf. Leaves without `requires_grad` are plain constants
    /// and never enter the tape.
    pub fn leaf(&self, value: Array<T>, requires_grad: bool) -> Tensor<T> {
        if !requires_grad {
            return Tensor::constant(value);
        }
        let id = self.push(Node {
            inputs: Vec::new(),
            backward: None,
            shape: value.shape().to_vec(),
        });
        Tensor {
            value,
            node: Some((self.clone(), id)),
        }
    }

    pub fn param(&self, value: Array<T>) -> Tensor<T> {
        self.leaf(value, true)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse pass from a scalar loss. Populates gradients of every leaf
    /// that the loss depends on. A tape can be consumed only once.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        let loss_id = match &loss.node {
            Some((tape, id)) if tape.same(self) => *id,
            Some(_) => return Err(Error::Autodiff("loss was recorded on a different tape".into())),
            None => return Err(Error::Autodiff("loss is detached from the tape".into())),
        };
        if loss.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }

        let mut nodes = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::Autodiff("backward already ran on this tape".into()));
            }
            inner.consumed = true;
            std::mem::take(&mut inner.nodes)
        };

        let mut grads: Vec<Option<Array<T>>> = vec![None; loss_id + 1];
        grads[loss_id] = Some(Array::ones(loss.shape()));
        let mut leaf_grads = HashMap::new();

        for id in (0..=loss_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            debug_assert_eq!(grad.shape(), nodes[id].shape.as_slice());
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                leaf_grads.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                if let (Some(input), Some(g)) = (input, g) {
                    grads[*input] = Some(accumulate(grads[*input].take(), g));
                }
            }
        }
        drop(nodes);

        self.inner.borrow_mut().leaf_grads = leaf_grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `leaf`, if the
    /// loss depended on it.
    pub fn grad(&self, leaf: &Tensor<T>) -> Option<Array<T>> {
        let (tape, id) = leaf.node.as_ref()?;
        if !tape.same(self) {
            return None;
        }
        self.inner.borrow().leaf_grads.get(id).cloned()
    }
}

fn accumulate<T: Scalar>(acc: Option<Array<T>>, g: Array<T>) -> Array<T> {
    match acc {
        None => g,
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            let shape = acc.shape().to_vec();
            let mut data = acc.into_vec();
            for (a, &b) in data.iter_mut().zip(g.data()) {
                *a += b;
            }
            Array::from_parts(shape, data)
        }
    }
}

/// A value that may participate in a [`Tape`].
pub struct Tensor<T: Scalar> {
    value: Array<T>,
    node: Option<(Tape<T>, usize)>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            value: self.value.clone(),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("value", &self.value)
            .field("node", &self.node.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

impl<T: Scalar> From<Array<T>> for Tensor<T> {
    fn from(value: Array<T>) -> Self {
        Tensor::constant(value)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn constant(value: Array<T>) -> Self {
        Tensor { value, node: None }
    }

    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn into_value(self) -> Array<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Tensor::constant(self.value.clone())
    }

    /// Records `out` as the result of an op over `inputs`. When no input is
    /// on a tape the result is a constant and `backward` is dropped unused.
    pub(crate) fn record<F>(op: &'static str, inputs: &[&Tensor<T>], out: Array<T>, backward: F) -> Result<Self>
    where
        F: FnOnce(&Array<T>, &[bool]) -> Vec<Option<Array<T>>> + 'static,
    {
        let mut tape: Option<&Tape<T>> = None;
        for t in inputs {
            if let Some((other, _)) = &t.node {
                match tape {
                    None => tape = Some(other),
                    Some(existing) if existing.same(other) => {}
                    Some(_) => {
                        return Err(Error::Autodiff(format!("{op}: inputs recorded on different tapes")))
                    }
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Tensor::constant(out));
        };
        if tape.inner.borrow().consumed {
            return Err(Error::Autodiff(format!("{op}: tape was already consumed by backward")));
        }
        let tape = tape.clone();
        let id = tape.push(Node {
            inputs: inputs.iter().map(|t| t.node.as_ref().map(|(_, id)| *id)).collect(),
            backward: Some(Box::new(backward)),
            shape: out.shape().to_vec(),
        });
        Ok(Tensor {
            value: out,
            node: Some((tape, id)),
        })
    }
}
