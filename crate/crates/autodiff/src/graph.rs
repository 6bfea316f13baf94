//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every op appends a node whose parents already exist on the tape, so node
//! ids are a topological order by construction. `backward` walks the ids in
//! descending order, which fixes the accumulation order for every leaf.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Local gradient rule of a node: given the gradient of the node's output and
/// a mask of which parents need a gradient, return one entry per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    shape: Vec<usize>,
}

#[derive(Clone, Default)]
pub struct Graph {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

/// A value recorded on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient during `backward`.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Rc::new(value), Vec::new(), None, requires_grad)
    }

    /// Record a custom operation. `backward` receives the output gradient and
    /// must return one entry per parent, in order.
    pub fn record(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        for p in parents {
            if !Rc::ptr_eq(&p.graph.nodes, &self.nodes) {
                return Err(TensorError::ForeignGraph);
            }
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad);
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(Rc::new(value), ids, bw, requires_grad))
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents,
            backward,
            requires_grad,
            shape: value.shape().to_vec(),
        });
        Var {
            graph: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    /// Reverse sweep from `output`. With no seed the output gradient is all
    /// ones.
    pub fn backward(&self, output: &Var, seed: Option<Tensor>) -> Result<Gradients> {
        if !Rc::ptr_eq(&output.graph.nodes, &self.nodes) {
            return Err(TensorError::ForeignGraph);
        }
        let nodes = self.nodes.borrow();
        let out_shape = &nodes[output.id].shape;
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(TensorError::shape(
                        "backward",
                        format!("seed {:?} vs output {:?}", s.shape(), out_shape),
                    ));
                }
                s
            }
            None => Tensor::ones(out_shape),
        };

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[output.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(mask) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].shape.as_slice(), "node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        self.graph
            .push(self.value.clone(), Vec::new(), None, false)
    }

    /// Shared handle to the value, for custom backward closures that must
    /// not keep the graph alive.
    pub fn shared_value(&self) -> Rc<Tensor> {
        self.value.clone()
    }

    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var> {
        self.graph.record(value, parents, backward)
    }

    /// Constant on the same graph.
    pub fn constant_like(&self, value: Tensor) -> Var {
        self.graph.constant(value)
    }
}

/// Gradients of the leaves reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when nothing reached it.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
