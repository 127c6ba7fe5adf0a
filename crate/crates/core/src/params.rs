//! Named trainable matrices.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};

/// Ordered name -> matrix map. Iteration order is the sorted key order,
/// which fixes the order of every reduction over parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Check that `name` exists with the given shape.
    pub fn expect_shape(&self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let t = self.get(name)?;
        if t.dim() != (rows, cols) {
            return Err(Error::Archive(format!(
                "parameter `{name}` has shape {:?}, expected ({rows}, {cols})",
                t.dim()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("parameter `{name}`"),
            });
        }
        Ok(())
    }

    /// Register every parameter on `tape` as a borrowed trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v)))
            .collect();
        BoundParams { vars }
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (k, v) in &self.tensors {
            a.insert(k.clone(), v.clone().into_dyn());
        }
        a
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let mut store = ParamStore::new();
        for name in archive.tensors.keys() {
            store.insert(name.clone(), archive.get2(name)?);
        }
        Ok(store)
    }

    /// Keep only entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Archive(format!("missing parameter `{name}`")))
    }

    /// Collect gradients into a store shaped like `like`; parameters that
    /// received no gradient get zeros.
    pub fn gradients(&self, grads: &mut Gradients, like: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, value) in like.iter() {
            let g = self
                .vars
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Array2::zeros(value.raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }

    /// Whether any gradient reached `name`.
    pub fn received_gradient(&self, grads: &Gradients, name: &str) -> bool {
        self.vars
            .get(name)
            .map(|&v| grads.get(v).is_some())
            .unwrap_or(false)
    }
}

/// `N(0, std^2)` matrix.
pub fn normal_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Xavier-normal init for a `fan_in x fan_out` weight.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_init(rng, fan_in, fan_out, std)
}

/// He-normal init, for ReLU stacks.
pub fn he<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    normal_init(rng, fan_in, fan_out, (2.0 / fan_in as f64).sqrt())
}
