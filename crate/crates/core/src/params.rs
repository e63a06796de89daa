//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;
use std::ops::Index;

use mico_autodiff::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in creation order. Names are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces every value with the one of the same name in `other`,
    /// after checking names and shapes agree one to one.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (name, value)) in other.iter().enumerate() {
            if self.names[i] != name {
                return Err(Error::ParamMismatch(format!(
                    "tensor {i} is `{name}`, expected `{}`",
                    self.names[i]
                )));
            }
            if self.values[i].shape() != value.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|t| {
                    let data = t.data().iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect();
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                })
                .collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Records every parameter as a leaf. Trainable leaves receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Truncated normal: standard normal draws outside ±2 are redrawn, then scaled.
pub fn trunc_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::from_f64_lossy(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
