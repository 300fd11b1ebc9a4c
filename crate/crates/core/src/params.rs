//! Named parameter tensors.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Ordered map of parameter name to tensor. Names are dotted paths such as
/// `detector.block0.attn.qkv.w`; the first segment is the parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// Copies every tensor of `other` into `self`, replacing same-named entries.
    pub fn merge(&mut self, other: &ParamSet<T>) {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
    }

    /// Tensors whose group (first path segment) is `group`.
    pub fn group(&self, group: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            if group_of(k) == group {
                out.insert(k, v.clone());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            out.insert(k, v.cast());
        }
        out
    }
}

/// First dotted segment of a parameter name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Gaussian init with standard deviation `std`.
pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::c(z * std)
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Xavier/Glorot-normal init for a `fan_in × fan_out` weight.
pub fn xavier<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix<T> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(rng, fan_in, fan_out, std)
}
