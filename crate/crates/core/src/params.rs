//! Named parameter storage shared by every model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, SaeError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Frozen parameters and buffers (running statistics) are not trainable.
    pub trainable: bool,
}

/// Ordered map from dotted parameter names (`vit.encoder.block1.attn.q.weight`)
/// to values. Iteration order is lexicographic, which keeps optimizer updates
/// and checkpoint layout deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get_entry(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| SaeError::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.get_entry(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| SaeError::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| SaeError::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    /// Total scalar count over trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix<'s>(&'s self, prefix: &'s str) -> impl Iterator<Item = (&'s String, &'s Param)> {
        self.entries
            .iter()
            .filter(move |(name, _)| name.starts_with(prefix))
    }
}

/// Parameter initializers used by the model builders.
/// A model whose weights live in one [`ParamStore`].
pub trait Parameterized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

pub(crate) mod init {
    use super::*;

    /// Glorot-uniform matrix `[fan_in, fan_out]`.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::rand_uniform(&[fan_in, fan_out], -a, a, rng)
    }

    /// He-normal conv kernel `[f, c, k, k]` scaled by fan-out.
    pub fn kaiming_conv(f: usize, c: usize, k: usize, rng: &mut impl Rng) -> Tensor {
        let std = (2.0 / (f * k * k) as f64).sqrt();
        Tensor::randn(&[f, c, k, k], std, rng)
    }
}
