//! Named parameter collections with trainable/frozen flags.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{ArchiveError, DType, StoredTensor, TensorArchive};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    pub dtype: DType,
}

/// Model weights keyed by dotted name (`backbone.stage1.conv.weight`, ...).
/// Iteration order is insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                trainable,
                dtype: DType::F32,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| config(format!("parameter `{name}` not present")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| config(format!("parameter `{name}` not present")))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Sets the on-disk dtype for every entry.
    pub fn set_storage_dtype(&mut self, dtype: DType) {
        for p in self.entries.values_mut() {
            p.dtype = dtype;
        }
    }

    /// Little-endian bytes of every frozen tensor, in name order.
    pub fn frozen_bytes(&self) -> Vec<(String, Vec<u8>)> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| {
                let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), bytes)
            })
            .collect()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (name, p) in &self.entries {
            a.insert(name.clone(), StoredTensor::new(p.dtype, p.value.clone()));
        }
        a
    }

    /// Every archive entry becomes a trainable parameter; apply the model's
    /// freezing policy afterwards.
    pub fn from_archive(archive: TensorArchive) -> Self {
        let mut set = Self::new();
        for (name, t) in archive.tensors {
            set.entries.insert(
                name,
                Param {
                    value: t.data,
                    trainable: true,
                    dtype: t.dtype,
                },
            );
        }
        set
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    /// Checks that every tensor of `template` is present here with the same
    /// shape, and copies the template's trainable flags.
    pub fn conform_to(&mut self, template: &ParameterSet) -> Result<(), ArchiveError> {
        for (name, t) in &template.entries {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| ArchiveError::MissingTensor(name.clone()))?;
            if p.value.shape() != t.value.shape() {
                return Err(ArchiveError::ShapeMismatch {
                    name: name.clone(),
                    expected: t.value.shape().to_vec(),
                    found: p.value.shape().to_vec(),
                });
            }
            p.trainable = t.trainable;
        }
        Ok(())
    }

    /// Registers every entry on `graph`: trainable entries as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind(&self, graph: &mut Graph) -> ParamVars {
        let map = self
            .entries
            .iter()
            .map(|(n, p)| {
                let v = if p.trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                };
                (n.clone(), v)
            })
            .collect();
        ParamVars { map }
    }
}

/// Loads an archive and validates it against a model's parameter template
/// when one is given.
pub fn load_parameter_archive(
    path: impl AsRef<Path>,
    template: Option<&ParameterSet>,
) -> Result<ParameterSet, ArchiveError> {
    let mut set = ParameterSet::from_archive(TensorArchive::load(path)?);
    if let Some(t) = template {
        set.conform_to(t)?;
    }
    Ok(set)
}

/// Graph handles for a bound [`ParameterSet`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    map: HashMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| config(format!("parameter `{name}` not present")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Weight initializers drawing from a seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        ArrayD::from_shape_fn(IxDyn(shape), |_| self.rng.gen_range(-bound..bound))
    }

    /// He-normal for ReLU stacks.
    pub fn kaiming_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(shape, std)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(self.rng))
    }
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Tensor {
    ArrayD::ones(IxDyn(shape))
}
