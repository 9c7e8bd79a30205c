//! Reverse-mode automatic differentiation on a tape of [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and a closure
//! that maps the output gradient to input gradients. Node ids increase in
//! creation order, so walking the tape backwards is a valid topological
//! order. Nodes whose inputs are all constants record no closure at all.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the inputs, in the order they were passed to the op.
    pub inputs: &'a [Rc<Tensor>],
    /// Forward value of this node.
    pub output: &'a Tensor,
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// The tape. One graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf: gradients flow into it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, true)
    }

    /// A constant: no gradient is ever computed for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    fn insert(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            needs_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Records an op. The closure is dropped when no input needs a gradient.
    pub(crate) fn op<'g, F>(&'g self, value: Tensor, inputs: &[Var<'g>], backward: F) -> Var<'g>
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        let backward: Option<BackwardFn> = if needs_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(value, parents, backward, needs_grad)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Back-propagates from a one-element `root` and returns the gradients
    /// of every trainable leaf that it depends on.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(root.graph, self),
            "root belongs to another graph"
        );
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        assert_eq!(
            root_value.numel(),
            1,
            "backward() needs a scalar root, got {:?}",
            root_value.shape()
        );

        let mut pending: Vec<Option<Tensor>> = vec![None; root.id + 1];
        pending[root.id] = Some(Tensor::new(root_value.shape(), vec![1.0]));
        let mut leaves = HashMap::new();

        for id in (0..=root.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaves.insert(id, grad);
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node
                .parents
                .iter()
                .map(|&p| nodes[p].value.clone())
                .collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for ((&parent, g), need) in node.parents.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[parent].value.shape(), "grad shape");
                match &mut pending[parent] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Forward value (shared, cheap to clone).
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.needs_grad(self.id)
    }

    /// A constant copy of this value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}
