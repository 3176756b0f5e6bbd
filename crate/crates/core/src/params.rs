//! Named parameter collections and their gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named tensors, iterated in name order so serialization and updates are
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panics on unknown names; layer code only asks for what it created.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every tensor as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Records every tensor as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Adds every tensor of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Gradient of every bound parameter (zero when unreachable).
    pub fn grads(&self, g: &Gradients) -> GradSet {
        GradSet {
            map: self.vars.iter().map(|(k, v)| (k.clone(), g.wrt(*v))).collect(),
        }
    }
}

/// A gradient per named parameter. Missing names read as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradSet {
    map: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            map: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm over all entries.
    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, |a, b| a + b)
            .sqrt()
    }

    pub fn scaled(&self, k: f64) -> GradSet {
        GradSet {
            map: self.map.iter().map(|(n, t)| (n.clone(), t.map(|v| v * k))).collect(),
        }
    }

    /// Elementwise sum; names present on one side only are carried over.
    pub fn add(&self, other: &GradSet) -> GradSet {
        let mut out = self.clone();
        for (k, v) in &other.map {
            match out.map.get_mut(k) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(v.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    out.map.insert(k.clone(), v.clone());
                }
            }
        }
        out
    }

    /// Inner product with another set, over shared names.
    pub fn dot(&self, other: &GradSet) -> f64 {
        self.map
            .iter()
            .filter_map(|(k, a)| other.map.get(k).map(|b| crate::tensor::dot(a.data(), b.data())))
            .sum()
    }
}
