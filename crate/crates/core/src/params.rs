//! Named parameter storage shared by model modules, the optimizer, and
//! checkpoints. Buffers are reference-counted so a training-step graph can
//! bind them as leaves without copying.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub(crate) data: Arc<Vec<T>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// Whether decoupled weight decay applies. Biases, normalization
    /// parameters, and the low-rank B factors opt out.
    pub decay: bool,
}

pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, data: Vec<T>, shape: Vec<usize>, decay: bool) -> ParamId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: buffer/shape mismatch"
        );
        assert!(!self.by_name.contains_key(name), "duplicate param name {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_owned(),
            data: Arc::new(data),
            shape,
            requires_grad: true,
            decay,
        });
        self.by_name.insert(name.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn numel(&self, id: ParamId) -> usize {
        self.entries[id.0].data.len()
    }

    pub fn decay(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, value: bool) {
        self.entries[id.0].requires_grad = value;
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    /// Mutable access for optimizer updates. Must not be called while a
    /// graph still borrows the buffer (between steps it never is).
    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        Arc::<Vec<T>>::make_mut(&mut self.entries[id.0].data)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of scalar parameters currently marked trainable.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.requires_grad).map(|e| e.data.len()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.requires_grad(id)).collect()
    }
}

/// Truncated normal init: N(0, std), resampled outside two standard
/// deviations. Reproducible given the caller's seeded RNG.
pub fn trunc_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    (0..n)
        .map(|_| {
            loop {
                let v = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    return T::from_f64(v);
                }
            }
        })
        .collect()
}
