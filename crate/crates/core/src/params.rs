//! Named parameter storage.
//!
//! Parameters live outside any differentiation graph; each training step
//! binds them into a fresh graph as requires-grad leaves and reads the
//! gradients back after `backward`. Insertion order is stable, which
//! makes checkpoint layout and optimizer iteration deterministic.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::shape::numel;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(Error::BadShape {
                op: "param",
                detail: format!("{name}: shape {shape:?} vs {} values", data.len()),
            });
        }
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), Param { data, shape: shape.to_vec() });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }
}

/// Binds store parameters into one graph, remembering every binding so
/// gradients can be read back by name after `backward`.
pub struct Binder<'a, T: Element> {
    graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: Vec<(String, Tensor<T>)>,
}

impl<'a, T: Element> Binder<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binder { graph, store, trainable, bound: Vec::new() }
    }

    pub fn bind(&mut self, name: &str) -> Result<Tensor<T>> {
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let t = self.graph.leaf(p.data.clone(), &p.shape, self.trainable)?;
        self.bound.push((name.to_string(), t.clone()));
        Ok(t)
    }

    /// The (name, leaf) pairs bound so far.
    pub fn into_bound(self) -> Vec<(String, Tensor<T>)> {
        self.bound
    }
}

/// Collects gradients of bound parameters by name. Parameters bound more
/// than once have their gradients summed.
pub fn collect_grads<T: Element>(bound: &[(String, Tensor<T>)]) -> IndexMap<String, Vec<T>> {
    let mut out: IndexMap<String, Vec<T>> = IndexMap::new();
    for (name, tensor) in bound {
        let Some(g) = tensor.grad() else { continue };
        match out.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a = *a + *b;
                }
            }
            None => {
                out.insert(name.clone(), g);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_bad_shapes() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", vec![1.0, 2.0], &[2]).unwrap();
        assert!(store.insert("w", vec![3.0], &[1]).is_err());
        assert!(store.insert("b", vec![1.0], &[2]).is_err());
    }

    #[test]
    fn binder_round_trips_gradients() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", vec![3.0, -1.0], &[2]).unwrap();
        let g = Graph::new();
        let mut binder = Binder::new(&g, &store, true);
        let w = binder.bind("w").unwrap();
        let loss = w.mul(&w).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let grads = collect_grads(&binder.into_bound());
        assert_eq!(grads["w"], vec![6.0, -2.0]);
    }

    #[test]
    fn unknown_name_is_config_error() {
        let store: ParamStore<f64> = ParamStore::new();
        let g = Graph::new();
        let mut binder = Binder::new(&g, &store, true);
        assert!(matches!(binder.bind("nope"), Err(Error::Config(_))));
    }
}
