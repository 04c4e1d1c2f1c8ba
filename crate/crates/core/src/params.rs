//! Learnable parameter storage, grouped by model component.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    group: String,
    value: Matrix<T>,
}

/// Flat list of named matrices. Layers hold [`ParamId`]s into it.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, group: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            group: group.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    /// Group names in first-registration order, each once.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.iter().any(|g| g == &e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    pub fn to_snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            tensors: self
                .entries
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    data: e.value.as_slice().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a snapshot whose names and shapes match this store.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.tensors.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                snap.tensors.len(),
                self.entries.len()
            )));
        }
        for (e, t) in self.entries.iter_mut().zip(&snap.tensors) {
            if e.name != t.name || e.value.shape() != (t.rows, t.cols) {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} ({}x{}) does not match model tensor {} {:?}",
                    t.name,
                    t.rows,
                    t.cols,
                    e.name,
                    e.value.shape()
                )));
            }
            e.value = Matrix::from_vec(t.rows, t.cols, t.data.iter().map(|&v| T::of(v)).collect())?;
        }
        Ok(())
    }
}

/// Serialized form of a [`ParamStore`], stored in double precision.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamSnapshot {
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Gradient accumulator with one matrix per stored parameter.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    grads: Vec<Matrix<T>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradBuffer {
            grads: store
                .entries
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix<T>) {
        self.grads[id.0].add_assign(g);
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

/// Registers parameters under a group name and draws their initial values.
///
/// Values are drawn in f64 and cast, so a model initialised with the same
/// seed has the same parameters in every precision (up to rounding).
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    group: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: impl Into<String>) -> Self {
        ParamBuilder {
            store,
            rng,
            group: group.into(),
        }
    }

    /// Builder for a different group sharing the same store and stream.
    pub fn group(&mut self, group: impl Into<String>) -> ParamBuilder<'_, T> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            group: group.into(),
        }
    }

    pub fn group_name(&self) -> &str {
        &self.group
    }

    fn qualified(&self, name: &str) -> String {
        format!("{}.{}", self.group, name)
    }

    /// Uniform in ±√(1/fan_in).
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| T::of(rng.gen_range(-bound..=bound)));
        let name = self.qualified(name);
        self.store.push(name, self.group.clone(), m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        let name = self.qualified(name);
        self.store
            .push(name, self.group.clone(), Matrix::filled(rows, cols, T::of(v)))
    }
}
