use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named model parameters in insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        match self.index_of(name) {
            Some(i) => self.entries[i].1 = value,
            None => self.entries.push((name.to_string(), value)),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Copies every entry of `other` whose name starts with `prefix`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name, t.clone());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Per-parameter gradient accumulators aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    pub fn get(&self, index: usize) -> Option<&Tensor<T>> {
        self.slots.get(index).and_then(Option::as_ref)
    }

    pub fn by_name<'a>(&'a self, params: &ParamStore<T>, name: &str) -> Option<&'a Tensor<T>> {
        params.index_of(name).and_then(|i| self.get(i))
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.axpy(T::one(), t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.slots.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// A forward pass in progress: a graph plus lazily bound parameters.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Real> Session<'a, T> {
    /// Parameters become differentiable leaves.
    pub fn training(params: &'a ParamStore<T>) -> Self {
        Self::with_graph(params, Graph::new(), true)
    }

    /// Parameters become constants; nothing is differentiable.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self::with_graph(params, Graph::new(), false)
    }

    pub fn with_graph(params: &'a ParamStore<T>, graph: Graph<T>, trainable: bool) -> Self {
        Self {
            graph,
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Graph variable for parameter `name`, inserting it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let t = self.params.entries[i].1.clone();
        let v = self.graph.leaf(t, self.trainable);
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Binds parameter `name` to an existing graph variable, so a whole
    /// model can be differentiated with respect to caller-owned inputs.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let (want, got) = (self.params.entries[i].1.shape(), self.graph.value(var).shape());
        if want != got {
            return Err(Error::ShapeMismatch {
                op: "bind",
                lhs: want.to_vec(),
                rhs: got.to_vec(),
            });
        }
        self.bound[i] = Some(var);
        Ok(())
    }

    /// Runs backward from `loss` and returns the parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        self.graph.backward(loss)?;
        let slots = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.take_grad(v)))
            .collect();
        Ok(Grads { slots })
    }
}
