//! Named parameter storage and the per-forward binding of parameters to a
//! graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.requires_grad = true;
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// `{prefix}.weight (out, in)` uniform in `±1/√in`, `{prefix}.bias` zero.
    pub fn init_linear<R: Rng + ?Sized>(&mut self, prefix: &str, input: usize, output: usize, rng: &mut R) {
        let bound = 1.0 / (input as f64).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&[output, input], bound, rng));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[output]));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
                n += 1;
            }
        }
        n
    }
}

/// One forward pass: a fresh graph plus the parameters bound onto it so far.
/// Each parameter is recorded once per graph, so shared use accumulates
/// gradients on a single leaf.
pub struct Ctx<'p> {
    pub g: Graph,
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    /// Continues recording on an existing graph.
    pub fn adopt(g: Graph, params: &'p ParamStore, trainable: bool) -> Self {
        Ctx {
            g,
            params,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Uses `v` for `name` instead of the stored tensor.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable {
            self.g.leaf(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `{prefix}.weight` and `{prefix}.bias` applied as a linear map.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.g.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta, 1e-5)
    }

    /// Gradients of every bound parameter after `g.backward`.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}
