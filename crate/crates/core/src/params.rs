//! Named parameter tensors and their initialization.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result, Tensor};

/// Standard deviation of the truncated normal used for weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Ordered collection of named tensors. Insertion order is the
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.entries.push((name.clone(), tensor));
        self.index.insert(name, self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites every parameter whose name starts with `prefix` with the
    /// same-named tensor of `source`, requiring identical shapes.
    pub fn copy_prefix_from(&mut self, source: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, tensor) in self.entries.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            let src = source.require(name)?;
            if src.shape() != tensor.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    tensor.shape(),
                    src.shape()
                )));
            }
            *tensor = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Keeps only parameters whose name starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n.to_string(), t.clone()).expect("names are unique");
        }
        out
    }
}

/// Zero-mean Gaussian with standard deviation `std`, resampled outside ±2σ.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        };
    }
    t
}
