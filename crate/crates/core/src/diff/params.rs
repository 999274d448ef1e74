use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identifies one parameter store. Gradients are tagged with it so that an
/// optimizer can never apply one network's gradients to another network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: StoreId,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    /// A clone is a new, independent store with a fresh id.
    fn clone(&self) -> Self {
        ParamStore {
            id: StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed)),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed)),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor's values, checking names and shapes.
    pub fn load_from(&mut self, blocks: &[(String, Tensor<T>)]) -> Result<()> {
        if blocks.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                self.tensors.len(),
                blocks.len()
            )));
        }
        for (i, (name, t)) in blocks.iter().enumerate() {
            if name != &self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "block {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
        }
        for (dst, (_, src)) in self.tensors.iter_mut().zip(blocks) {
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradients for the parameters of a single store.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    store: StoreId,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(store: StoreId, n: usize) -> Self {
        Gradients {
            store,
            grads: vec![None; n],
        }
    }

    pub fn store(&self) -> StoreId {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self`; both must target the same store.
    pub fn merge(&mut self, other: &Gradients<T>) -> Result<()> {
        if other.store != self.store {
            return Err(Error::ForeignGradients {
                expected: self.store.0,
                found: other.store.0,
            });
        }
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("{what} gradient of parameter {i}")));
                }
            }
        }
        Ok(())
    }
}
