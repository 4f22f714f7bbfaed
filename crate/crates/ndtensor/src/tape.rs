use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may read.
pub struct BackwardArgs<'a, T: Real> {
    /// Gradient of the loss with respect to this op's output.
    pub grad: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
}

/// Maps the output gradient to one optional gradient per input, each the
/// size of the corresponding input. `None` means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// valid topological order for the backward sweep. A tape is single-use per
/// optimisation step: call [`Tape::reset`] (or build a fresh one) between
/// steps.
///
/// Calling [`Tape::backward`] more than once accumulates into the leaf
/// gradients; intermediate gradients are recomputed from scratch each call.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf. It participates in differentiation
    /// iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// Records an op computed outside the crate. `backward` is only kept
    /// when at least one input needs a gradient.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            parents: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(bw) => {
                    let args = BackwardArgs {
                        grad: &g,
                        output: &node.value,
                        inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                    };
                    let parent_grads = bw(&args);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), self.nodes[p.0].value.numel());
                        accumulate(&mut grads[p.0], pg);
                    }
                }
                None => accumulate(&mut self.leaf_grads[i], g),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
