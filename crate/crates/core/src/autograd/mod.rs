//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Leaves created with [`Graph::param`] require gradients; leaves created with
//! [`Graph::constant`] do not, and no backward work is done on paths that
//! only involve constants.

mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::Tensor;

#[cfg(test)]
pub(crate) use ops::conv2d_forward;

pub(crate) struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Operation tape. Not `Sync`; build one per forward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; every node is treated as a constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), false)
    }

    pub fn param(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), self.grad_enabled)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradients of the scalar `root` with respect to every node requiring one.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].value.as_ref())
                    .collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` if it received no gradient.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}

pub use ops::{
    add_broadcast, avg_pool2, batch_norm_eval, batch_norm_train, concat_channels, conv2d,
    cross_entropy, first_token, gather_channels, global_avg_pool, layer_norm, linear, max_pool2,
    mul_channel_mask, multi_head_attention, prepend_token, resize_bilinear, squared_variation_sum,
    transpose_last2, BatchStats,
};

/// Central finite-difference gradient checks.
pub mod gradcheck {
    use super::*;

    /// Finite-difference step.
    pub const STEP: f64 = 1e-4;

    /// Largest relative error between analytic and central-difference
    /// gradients of `f` with respect to each input tensor.
    pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: for<'a> Fn(&'a Graph, &[Var<'a>]) -> Var<'a>,
    {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

        let eval = |ins: &[Tensor]| -> f64 {
            let g = Graph::inference();
            let vars: Vec<Var<'_>> = ins.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars).value().item()
        };
        let h = STEP;
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i].data()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests;
