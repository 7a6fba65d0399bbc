use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Who owns a parameter: the shared body or one attached dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Shared,
    Dataset(usize),
}

/// What a parameter is used for. Drives weight-decay exemption and freeze masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
    Norm,
    Embedding,
    Context,
    CoefficientLogits,
}

impl Role {
    /// Embedding, normalization and bias parameters are not decayed.
    pub fn weight_decay_exempt(self) -> bool {
        matches!(self, Role::Bias | Role::Norm | Role::Embedding)
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub weight_decay_exempt: bool,
    pub scope: Scope,
    pub role: Role,
}

impl Parameter {
    /// SHA-256 over the little-endian bytes of the values.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.tensor.data() {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Flat registry of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        scope: Scope,
        role: Role,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
            weight_decay_exempt: role.weight_decay_exempt(),
            scope,
            role,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable(&mut self, ids: &[ParamId], trainable: bool) {
        for id in ids {
            self.params[id.0].trainable = trainable;
        }
    }

    /// Total number of scalar values across `ids`.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].tensor.len()).sum()
    }

    pub fn digests(&self) -> Vec<[u8; 32]> {
        self.params.iter().map(Parameter::digest).collect()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Vec<f64>) {
        self.entries.insert(id, grad);
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        match self.entries.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            None => {
                self.entries.insert(id, grad.to_vec());
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.entries.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
