use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`NetParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: String,
    value: Tensor,
    grad: Tensor,
    sq_avg: Vec<f64>,
}

/// Named parameter tensors with gradient buffers and per-group freezing.
#[derive(Clone, Debug, Default)]
pub struct NetParams {
    entries: Vec<Entry>,
    frozen: BTreeSet<String>,
}

const MAGIC: &[u8; 4] = b"CSNN";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    params: Vec<CheckpointEntry>,
    frozen_groups: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

impl NetParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: &str, group: &str, value: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let n = value.len();
        self.entries.push(Entry {
            name: name.to_string(),
            group: group.to_string(),
            grad: Tensor::zeros(value.shape()),
            value,
            sq_avg: vec![0.0; n],
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Register a tensor drawn uniformly from ±1/√fan_in.
    pub fn add_uniform(
        &mut self,
        name: &str,
        group: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, group, Tensor::new(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, group: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn add_filled(&mut self, name: &str, group: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, group, Tensor::zeros(shape).map(|_| v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Overwrite a parameter. Frozen groups refuse.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if self.frozen.contains(&e.group) {
            return Err(Error::InvalidArgument(format!("group {} is frozen", e.group)));
        }
        if value.shape() != e.value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Raw mutable access, bypassing the frozen check. Used by finite-difference probes
    /// that restore the original value afterwards.
    pub(crate) fn value_mut_unchecked(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Add `g` into the gradient buffer of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.entries[id.0].grad.add_assign(g)
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.entries[id.0].grad.data_mut()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn freeze(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen.contains(&self.entries[id.0].group)
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.group.clone()).collect()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Every trainable value clamped to `[-c, c]`.
    pub fn clip_values(&mut self, c: f64) {
        for e in &mut self.entries {
            if self.frozen.contains(&e.group) {
                continue;
            }
            e.value.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    }

    /// Bytes of the serialized values of one group, for bit-identity checks.
    pub fn group_bytes(&self, group: &str) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub(crate) fn update_trainable(&mut self, mut f: impl FnMut(&mut [f64], &[f64], &mut [f64])) {
        for e in &mut self.entries {
            if self.frozen.contains(&e.group) {
                continue;
            }
            f(e.value.data_mut(), e.grad.data(), &mut e.sq_avg);
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            params: self
                .entries
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
            frozen_groups: self.frozen.iter().cloned().collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.scalar_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut cursor = 16 + hlen;
        let mut params = NetParams::new();
        for p in header.params {
            let n: usize = p.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + n * 8)
                .ok_or_else(|| bad("truncated data"))?;
            cursor += n * 8;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.add(&p.name, &p.group, Tensor::new(&p.shape, data)?)?;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        params.frozen = header.frozen_groups.into_iter().collect();
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copy values of every parameter in `groups` from `src`, matching by name and shape.
    /// Writes through frozen flags on `self`: this is how a frozen module gets its weights.
    pub fn load_groups_from(&mut self, src: &NetParams, groups: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if !groups.contains(&e.group.as_str()) {
                continue;
            }
            let s = src
                .find(&e.name)
                .map(|id| src.value(id))
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks {}", e.name)))?;
            if s.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "{}: checkpoint shape {:?}, expected {:?}",
                    e.name,
                    s.shape(),
                    e.value.shape()
                )));
            }
            e.value = s.clone();
            copied += 1;
        }
        Ok(copied)
    }
}
