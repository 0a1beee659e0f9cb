//! Named parameter collections and their single-file weight container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "RSCL" | u32 version | u32 tensor count
//! per tensor:  u32 name len | name (utf-8) | u8 dtype | u32 rank | u64 dims[rank] | payload
//! trailer:     "CFGH" | u32 phase len | phase (utf-8) | 32-byte config hash
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RSCL";
const TRAILER: &[u8; 4] = b"CFGH";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 of a canonical configuration string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ConfigHash(pub [u8; 32]);

impl ConfigHash {
    pub fn of(canonical: &str) -> Self {
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        ConfigHash(out)
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short(&self) -> String {
        self.hex()[..12].to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<S> {
    tensors: BTreeMap<String, Tensor<S>>,
    config_hash: ConfigHash,
    phase: String,
}

impl<S: Real> Default for ParameterStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            tensors: BTreeMap::new(),
            config_hash: ConfigHash::default(),
            phase: String::new(),
        }
    }

    /// Insert a new trainable tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let tensor = if tensor.requires_grad() {
            tensor
        } else {
            tensor.with_grad()
        };
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn config_hash(&self) -> ConfigHash {
        self.config_hash
    }

    pub fn set_config_hash(&mut self, hash: ConfigHash) {
        self.config_hash = hash;
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    pub fn set_phase(&mut self, phase: impl Into<String>) {
        self.phase = phase.into();
    }

    /// Tensors whose name starts with `from`, renamed to start with `to`.
    pub fn extract_prefix(&self, from: &str, to: &str) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(from)
                    .map(|rest| (format!("{to}{rest}"), v.clone()))
            })
            .collect();
        ParameterStore {
            tensors,
            config_hash: self.config_hash,
            phase: self.phase.clone(),
        }
    }

    /// Move every tensor of `other` into `self`; fails on name collisions.
    pub fn merge(&mut self, other: ParameterStore<S>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Copy values (not gradients) from `other` for every name they share
    /// with matching shapes; returns how many tensors were copied.
    pub fn copy_values_from(&mut self, other: &ParameterStore<S>) -> Result<usize> {
        let mut n = 0;
        for (k, src) in &other.tensors {
            if let Some(dst) = self.tensors.get_mut(k) {
                if dst.shape() != src.shape() {
                    return Err(Error::ConfigMismatch(format!(
                        "`{k}` has shape {:?}, file has {:?}",
                        dst.shape(),
                        src.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(src.data());
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_values() * S::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(S::DTYPE as u8);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out.extend_from_slice(TRAILER);
        out.extend_from_slice(&(self.phase.len() as u32).to_le_bytes());
        out.extend_from_slice(self.phase.as_bytes());
        out.extend_from_slice(&self.config_hash.0);
        out
    }

    /// Parse a container. Payloads of either dtype are converted to `S`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::WeightFormat("tensor name is not utf-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::WeightFormat(format!("unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * dtype.size())?;
            let data: Vec<S> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| S::of(f32::read_le(c) as f64))
                    .collect(),
                DType::F64 => payload.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect(),
            };
            store.insert(name, Tensor::new(&shape, data)?)?;
        }
        if r.take(4)? != TRAILER {
            return Err(Error::WeightFormat("missing config-hash record".into()));
        }
        let phase_len = r.u32()? as usize;
        store.phase = String::from_utf8(r.take(phase_len)?.to_vec())
            .map_err(|_| Error::WeightFormat("phase tag is not utf-8".into()))?;
        store.config_hash.0.copy_from_slice(r.take(32)?);
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and require the stored hash to equal `expected`.
    pub fn load_checked(path: impl AsRef<Path>, expected: ConfigHash) -> Result<Self> {
        let store = Self::load(path)?;
        if store.config_hash != expected {
            return Err(Error::ConfigMismatch(format!(
                "weight file hash {} does not match configured encoder {}",
                store.config_hash.short(),
                expected.short()
            )));
        }
        Ok(store)
    }

    pub fn cast<T: Real>(&self) -> ParameterStore<T> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            config_hash: self.config_hash,
            phase: self.phase.clone(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::WeightFormat("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
