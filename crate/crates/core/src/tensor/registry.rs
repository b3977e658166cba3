use std::collections::HashMap;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub velocity: Vec<T>,
}

/// Named, ordered set of trainable tensors with their momentum buffers.
///
/// Names are hierarchical (`"backbone.conv1.weight"`); the top-level
/// component is the text before the first dot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry<T = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

/// Map from parameter name to the tape variable it was bound to.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }
}

impl<T: Scalar> ParameterRegistry<T> {
    pub fn new() -> Self {
        ParameterRegistry {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let velocity = vec![T::zero(); tensor.len()];
        self.entries.insert(
            name,
            ParamEntry {
                tensor,
                trainable: true,
                velocity,
            },
        );
        Ok(())
    }

    /// Replaces the tensor of an existing entry, resetting its momentum.
    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let e = self.get_mut(name)?;
        e.velocity = vec![T::zero(); tensor.len()];
        e.tensor = tensor;
        Ok(())
    }

    /// Weights uniform in `±√(1/fan_in)`, as used for conv and linear layers.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.uniform(-bound, bound)))
            .collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<T>> {
        self.entries.shift_remove(name)
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Records every parameter as a tape leaf; trainable entries request
    /// gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| {
                let leaf = e.tensor.clone().with_requires_grad(e.trainable);
                (name.clone(), tape.leaf(leaf))
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients from a finished backward pass into each trainable
    /// entry's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bindings: &Bindings) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            if !e.trainable {
                continue;
            }
            let var = bindings.get(name)?;
            let g = tape
                .grad(var)
                .ok_or_else(|| Error::Contract(format!("no gradient recorded for {name}")))?;
            match e.tensor.grad_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a = *a + v),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            *e.tensor.grad_mut() = None;
        }
    }

    /// SHA-256 over names, shapes, and little-endian parameter values.
    pub fn checksum(&self) -> String {
        self.checksum_filtered(|_| true)
    }

    /// Checksum restricted to entries whose name passes `keep`.
    pub fn checksum_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter().filter(|(n, _)| keep(n)) {
            h.update(name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// True when `name` lies under hierarchical `prefix` (`"backbone"` matches
/// `"backbone.conv1.weight"` but not `"backbones.x"`).
pub(crate) fn name_has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'.')
}
