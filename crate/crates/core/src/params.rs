//! Named parameter storage and per-step binding of parameters into a graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialized matrix of shape `rows × cols`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.add(name, Tensor::uniform(&[rows, cols], bound, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies values from `other` by name, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "snapshot has {} parameters, architecture expects {}",
                other.len(),
                self.len()
            )));
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] || self.values[i].shape() != other.values[i].shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match snapshot `{}` {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    other.names[i],
                    other.values[i].shape()
                )));
            }
            self.values[i] = other.values[i].clone();
        }
        Ok(())
    }
}

/// One forward/backward pass: a fresh graph with parameters bound lazily.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for a parameter; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradient per parameter, zero for parameters the loss never touched.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let grads: Gradients = self.graph.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => grads.wrt(v),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect())
    }
}
