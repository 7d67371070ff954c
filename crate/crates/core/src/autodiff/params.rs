use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::Array;
use super::tape::{Tape, Tensor};

/// Ordered set of named parameter arrays.
///
/// Insertion order is the binding order: [`ParamStore::bind`] returns leaves
/// in the same order, and optimizer state is kept positionally.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Adds a parameter initialised uniformly in `(-s, s)` with `s = 1/sqrt(fan_in)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
        self.insert(name, Array::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Vec<Tensor> {
        self.values.iter().map(|v| tape.var(v.clone())).collect()
    }

    /// Parameters as constants (inference without recording).
    pub fn constants(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .map(|v| Tensor::constant(v.clone()))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::numel).sum()
    }
}
