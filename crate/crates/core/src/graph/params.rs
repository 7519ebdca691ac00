use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming,
    Zero,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Updated by the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Stored as a rank-1 tensor on disk.
    pub fn is_vector(self) -> bool {
        !matches!(self, ParamKind::Weight)
    }

    pub fn weight_decay(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Dims,
    pub kind: ParamKind,
    pub init: Init,
}

/// Parameter tensors by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Per-name seed so unrelated parameters never shift each other's draws.
fn name_seed(seed: u64, name: &str) -> u64 {
    seed ^ (u64::from(crc32fast::hash(name.as_bytes())) << 17) ^ name.len() as u64
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    /// Fresh initialization of every parameter the graph binds.
    pub fn init(graph: &ModelGraph, seed: u64) -> Self {
        let mut set = ParamSet::new();
        for spec in graph.param_specs() {
            let t = init_tensor(&spec, seed);
            set.tensors.insert(spec.name, t);
        }
        set
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::param(name, "missing"))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that every bound parameter exists with the right dims.
    pub fn validate(&self, graph: &ModelGraph) -> Result<()> {
        for spec in graph.param_specs() {
            let t = self.require(&spec.name)?;
            if t.dims() != spec.dims {
                return Err(Error::param(
                    &spec.name,
                    format!("expected dims {}, got {}", spec.dims, t.dims()),
                ));
            }
        }
        Ok(())
    }

    /// Names present here but not bound by the graph.
    pub fn unmatched(&self, graph: &ModelGraph) -> Vec<String> {
        let bound: std::collections::HashSet<String> = graph.param_specs().into_iter().map(|s| s.name).collect();
        self.tensors.keys().filter(|k| !bound.contains(*k)).cloned().collect()
    }

    /// Keeps only the parameters the graph binds.
    pub fn restricted_to(&self, graph: &ModelGraph) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for spec in graph.param_specs() {
            out.insert(spec.name.clone(), self.require(&spec.name)?.clone());
        }
        Ok(out)
    }

    /// Copies matching parameters from `other`; returns how many were taken.
    pub fn overlay(&mut self, other: &ParamSet<T>) -> usize {
        let mut n = 0;
        for (k, v) in &other.tensors {
            if let Some(slot) = self.tensors.get_mut(k) {
                if slot.dims() == v.dims() {
                    *slot = v.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &ParamSet<T>) -> bool
    where
        T: crate::tensor::BitRepr,
    {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}

impl<T: Element> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

fn init_tensor<T: Element>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Zero => Tensor::zeros(spec.dims),
        Init::One => Tensor::filled(spec.dims, T::one()),
        Init::Kaiming => {
            let fan_in = spec.dims.c * spec.dims.h * spec.dims.w;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
            Tensor::from_fn(spec.dims, |_| T::from_f64_lossy(normal.sample(&mut rng)))
        }
    }
}
