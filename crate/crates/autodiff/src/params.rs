use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Parameters bound as leaves of one graph for a single forward pass.
pub struct Session {
    graph: Graph,
    vars: IndexMap<String, Var>,
}

impl Session {
    /// Bind every parameter of `store`; `trainable` decides whether they
    /// collect gradients.
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        let graph = Graph::new();
        let vars = store
            .iter()
            .map(|(k, v)| (k.to_string(), graph.leaf(v.clone(), trainable)))
            .collect();
        Self { graph, vars }
    }

    /// Bind caller-provided leaves, e.g. from a finite-difference harness.
    pub fn from_vars<'a>(graph: &Graph, bound: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            graph: graph.clone(),
            vars: bound.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .cloned()
            .ok_or_else(|| TensorError::invalid("session", format!("unknown parameter `{name}`")))
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    /// Per-parameter gradients in binding order; zeros where none arrived.
    pub fn gradients(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}
