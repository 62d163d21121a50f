use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::numeric::{Real, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter inside a specific [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters never receive gradients and are never updated.
    pub frozen: bool,
    pub grad: Option<Tensor<T>>,
    pub momentum: Option<Tensor<T>>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    id: u64,
    params: Vec<Parameter<T>>,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) map: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Parameters with a gradient, in a stable order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.map.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// L2 norm over every gradient entry, summed in a stable order.
    pub fn global_norm(&self) -> f64 {
        self.ids()
            .iter()
            .map(|id| self.map[id].data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v = *v * c;
            }
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
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
            grad: None,
            momentum: None,
        });
        ParamId {
            store: self.id,
            index: self.params.len() - 1,
        }
    }

    /// He-normal initialised weight (`std = sqrt(2 / fan_in)`).
    pub fn add_he(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        self.add(name, Tensor::from_vec(shape.to_vec(), data).expect("shape"))
    }

    pub fn id_at(&self, index: usize) -> ParamId {
        assert!(index < self.params.len());
        ParamId { store: self.id, index }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id && id.index < self.params.len()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        assert!(self.owns(id), "parameter id from a different store");
        &self.params[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        assert!(self.owns(id), "parameter id from a different store");
        &mut self.params[id.index]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|index| ParamId { store: self.id, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId { store: self.id, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
            p.grad = None;
            p.momentum = None;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add gradients belonging to this store into the per-parameter buffers.
    /// Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in &grads.map {
            if id.store != self.id {
                continue;
            }
            let p = &mut self.params[id.index];
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// SHA-256 over parameter names, shapes and raw little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.tensor.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex(&hasher.finalize())
    }

    /// Same parameters in another precision. Ids issued by `self` stay
    /// valid for the copy, so structs holding [`ParamId`]s can be cast too.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            id: self.id,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                    grad: None,
                    momentum: None,
                })
                .collect(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
