//! Named parameter storage, seeded initialization and the forward context
//! that binds stored parameters to a [`Graph`].

use std::sync::Arc;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Position of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map from hierarchical name to tensor. Iteration order is
/// registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Real = f32> {
    tensors: IndexMap<String, Arc<Tensor<F>>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let (idx, _) = self.tensors.insert_full(name, Arc::new(t));
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name).map(|t| &**t)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).expect("valid id").0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Mutable access; clones the tensor if a graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn get_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub(crate) fn shared(&self, id: usize) -> Arc<Tensor<F>> {
        self.tensors[id].clone()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to ±2·std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

impl Init {
    pub const WEIGHT: Init = Init::TruncNormal(0.02);

    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break (z * std) as f32;
                    }
                })
                .collect(),
        }
    }
}

/// Registers parameters under a hierarchical dotted prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = init.sample(n, self.rng);
        let full = self.qualify(name);
        self.store.insert(full, Tensor::new(shape, data)?)
    }
}

/// Parameters bound as graph leaves for one forward pass.
pub struct Ctx<'g, F: Real = f32> {
    graph: &'g Graph<F>,
    vars: Vec<Var<F>>,
}

impl<'g, F: Real> Ctx<'g, F> {
    pub fn new(graph: &'g Graph<F>, store: &ParamStore<F>) -> Self {
        let vars = (0..store.len()).map(|i| graph.leaf(store.shared(i))).collect();
        Ctx { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn p(&self, id: ParamId) -> &Var<F> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<F>] {
        &self.vars
    }
}
