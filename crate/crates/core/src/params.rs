//! Named parameter storage and its binding onto a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Trainable arrays keyed by hierarchical dotted names
/// (`decoder.layers.0.cross_attn.q.weight`). Iteration order is the
/// lexicographic name order, which fixes every reduction over parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Binds a [`ParamStore`] to a graph for one forward pass. Each parameter
/// becomes a trainable leaf the first time it is requested.
pub struct Session<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    /// Leaf for parameter `name`.
    ///
    /// Panics when the name is unknown: module code and parameter
    /// initialization disagreeing is a programming error.
    pub fn param(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.graph.leaf(value);
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn constant(&self, value: Tensor) -> Var<'g> {
        self.graph.constant(value)
    }

    /// Gradients by parameter name. Parameters that were bound but received
    /// no gradient come back as zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
        if bound == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Uniform::new(-bound, bound).expect("valid bound");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    /// He-style uniform init scaled by fan-in, suited to ReLU layers.
    pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// Glorot uniform init for linear maps without a following ReLU.
    pub fn xavier_uniform(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Tensor {
        uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
    }
}
