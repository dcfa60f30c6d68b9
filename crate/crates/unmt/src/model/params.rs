//! Named parameter tensors and their per-graph leaf bindings.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, TensorId};

#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Ordered collection of named parameters. Order is the serialization and
/// optimizer-state order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<ParamTensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<T>) {
        assert_eq!(data.len(), rows * cols, "param {name} buffer/shape mismatch");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamTensor {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> &ParamTensor<T> {
        &self.entries[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamTensor<T> {
        &mut self.entries[self.index[name]]
    }

    pub fn at(&self, i: usize) -> &ParamTensor<T> {
        &self.entries[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut ParamTensor<T> {
        &mut self.entries[i]
    }

    pub fn position(&self, name: &str) -> usize {
        self.index[name]
    }

    /// Pushes every parameter into the graph as a leaf and records the ids.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| g.leaf(e.rows, e.cols, e.data.clone(), requires_grad))
            .collect();
        Binding {
            ids,
            name_to_pos: self.index.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf ids of one `bind` call, addressable by parameter name.
pub struct Binding {
    pub ids: Vec<TensorId>,
    name_to_pos: HashMap<String, usize>,
}

impl Binding {
    pub fn get(&self, name: &str) -> TensorId {
        self.ids[self.name_to_pos[name]]
    }

    /// Collects d loss / d param for every parameter after backward.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>) -> Result<Vec<Vec<T>>> {
        self.ids
            .iter()
            .map(|&id| {
                let (r, c) = g.shape(id);
                Ok(g.grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); r * c]))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e: Error| e)
    }
}

/// Normal(0, std) sampler; draws in f64 so f32 and f64 models consume the
/// RNG stream identically.
pub fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(T::from_f64(r * theta.cos() * std));
        if out.len() < n {
            out.push(T::from_f64(r * theta.sin() * std));
        }
    }
    out
}
