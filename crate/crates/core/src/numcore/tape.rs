//! Reverse-mode tape. Values are recorded in execution order; `backward`
//! walks the recorded nodes once, last to first.

use crate::error::{Result, SgcnError};

use super::real::Real;
use super::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `inputs` are the input values in recording order and `needs[i]` tells
/// whether input `i` wants a gradient. The returned vector has one entry per
/// input; `None` means no contribution.
pub trait Op<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_output: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<T>>>,
    // accumulated across backward passes; leaves only
    grad: Option<Vec<T>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        check_len(shape, &value)?;
        Ok(self.push_leaf(shape.to_vec(), value, false))
    }

    pub fn variable(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        check_len(shape, &value)?;
        Ok(self.push_leaf(shape.to_vec(), value, true))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an operation over earlier values.
    pub fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        inputs: Vec<Var>,
        op: Box<dyn Op<T>>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{} output", op.name());
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            inputs,
            op: Some(op),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are consistent")
    }

    /// Rows and columns of a rank-2 value.
    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(SgcnError::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Gradient accumulated on a leaf by earlier `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, adding into the gradient slot of
    /// every reachable leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(SgcnError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let Some(op) = &node.op else {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(g),
                }
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&[T]> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].value.as_slice())
                .collect();
            let contribs = op.backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(contribs.len(), node.inputs.len(), "{}", op.name());
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.len(), self.nodes[input.0].value.len(), "{}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}

fn check_len<T>(shape: &[usize], value: &[T]) -> Result<()> {
    if numel(shape) != value.len() {
        return Err(SgcnError::shape(format!(
            "shape {shape:?} needs {} values, got {}",
            numel(shape),
            value.len()
        )));
    }
    Ok(())
}
