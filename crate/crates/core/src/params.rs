//! Named parameter registry shared by every model in the crate.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    /// Checkpoint role tag, e.g. `backbone`, `type_prompt`, `knowledge_prefix`.
    pub role: String,
    pub tensor: Tensor,
}

#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        // A clone is a separate store: ids from the original do not resolve in it.
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, role: &str, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let index = self.entries.len();
        self.index.insert(name.clone(), index);
        self.entries.push(ParamEntry {
            name,
            role: role.to_string(),
            tensor: tensor.with_requires_grad(true),
        });
        Ok(ParamId {
            store: self.uid,
            index,
        })
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&index| ParamId {
                store: self.uid,
                index,
            })
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.uid, "parameter id from a different store");
        id.index
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[self.check(id)].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.check(id);
        &mut self.entries[i].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[self.check(id)].name
    }

    pub fn role(&self, id: ParamId) -> &str {
        &self.entries[self.check(id)].role
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|index| ParamId {
            store: self.uid,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.index.get(name).map(|&i| self.entries[i].tensor.shape())
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.tensor_mut(id).set_requires_grad(on);
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.tensor.set_requires_grad(on);
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensor(id).requires_grad()
    }

    /// Adds the parameter gradients of one backward pass into the stored
    /// accumulators, scaled by `weight`. Ids from other stores are ignored.
    pub fn accumulate(&mut self, grads: &Gradients, weight: f64) -> Result<()> {
        for (id, g) in grads.params() {
            if id.store != self.uid || !self.entries[id.index].tensor.requires_grad() {
                continue;
            }
            let scaled: Vec<f64> = g.iter().map(|x| x * weight).collect();
            self.entries[id.index].tensor.accumulate_grad(&scaled)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.tensor(id)
            .grad()
            .map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// SHA-256 over (name, shape, little-endian values) of the selected
    /// parameters, in registration order.
    pub fn digest_where(&self, mut select: impl FnMut(&ParamEntry) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| select(e)) {
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn digest_prefix(&self, prefix: &str) -> String {
        self.digest_where(|e| e.name.starts_with(prefix))
    }

    pub fn digest_frozen(&self) -> String {
        self.digest_where(|e| !e.tensor.requires_grad())
    }

    /// Copies every parameter under `src_prefix` in `src` into this store
    /// under `dst_prefix`, registering missing entries and overwriting
    /// existing ones with matching shape.
    pub fn copy_prefix(&mut self, src: &ParamStore, src_prefix: &str, dst_prefix: &str, role: &str) -> Result<usize> {
        let mut n = 0;
        for e in src.entries.iter().filter(|e| e.name.starts_with(src_prefix)) {
            let name = format!("{dst_prefix}{}", &e.name[src_prefix.len()..]);
            match self.index.get(&name) {
                Some(&i) => {
                    let dst = &mut self.entries[i].tensor;
                    if dst.shape() != e.tensor.shape() {
                        return Err(Error::shape(
                            "copy_prefix",
                            format!("`{name}` is {:?}, source is {:?}", dst.shape(), e.tensor.shape()),
                        ));
                    }
                    dst.data_mut().copy_from_slice(e.tensor.data());
                }
                None => {
                    let t = Tensor::new(e.tensor.shape().to_vec(), e.tensor.data().to_vec())?;
                    self.register(name, role, t)?;
                }
            }
            n += 1;
        }
        Ok(n)
    }

    pub fn set_role_prefix(&mut self, prefix: &str, role: &str) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.role = role.to_string();
        }
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn filled_tensor(shape: impl Into<Vec<usize>>, v: f64) -> Tensor {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![v; n]).expect("shape matches data")
}
