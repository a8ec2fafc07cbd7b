//! Named parameter arrays with gradient buffers and on-disk checkpoints.
//!
//! Checkpoint layout: a `manifest.json` listing names, shapes and the
//! checkpoint id, plus one raw little-endian `f64` file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug)]
struct Slot {
    value: Arc<Tensor>,
    grad: Tensor,
}

/// Parameters keyed by name; iteration order is the sorted name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    checkpoint_id: String,
    tensors: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(
            name.into(),
            Slot {
                value: Arc::new(value),
                grad,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    /// Panics on an unknown name; parameter names are fixed by the model code.
    pub fn get(&self, name: &str) -> &Tensor {
        &self.slot(name).value
    }

    /// Shared handle for [`crate::Tape::param`].
    pub fn shared(&self, name: &str) -> Arc<Tensor> {
        Arc::clone(&self.slot(name).value)
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.slot(name).grad
    }

    fn slot(&self, name: &str) -> &Slot {
        self.slots
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn zero_grad(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| NumericsError::Usage(format!("unknown parameter {name}")))?;
        if slot.grad.shape() != delta.shape() {
            return Err(NumericsError::Shape(format!(
                "gradient for {name}: expected {:?}, got {:?}",
                slot.grad.shape(),
                delta.shape()
            )));
        }
        slot.grad.add_assign(delta);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> &mut Tensor {
        let slot = self.slots.get_mut(name).expect("known parameter");
        Arc::make_mut(&mut slot.value)
    }

    pub(crate) fn iter_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.grad))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &*s.value))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.values().all(|s| s.value.all_finite())
    }

    pub fn total_len(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn checkpoint_id(&self) -> String {
        let mut h = Sha256::new();
        for (name, slot) in &self.slots {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in slot.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in slot.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::with_capacity(self.slots.len());
        for (name, slot) in &self.slots {
            let file = format!("{name}.f64");
            let mut bytes = Vec::with_capacity(slot.value.numel() * 8);
            for v in slot.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: slot.value.shape().to_vec(),
                file,
            });
        }
        let id = self.checkpoint_id();
        let manifest = Manifest {
            checkpoint_id: id.clone(),
            tensors,
        };
        fs::write(
            dir.join(CHECKPOINT_MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(id)
    }

    /// Loads a checkpoint and verifies every shape and the content hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
        let mut store = ParamStore::new();
        for entry in &manifest.tensors {
            let bytes = fs::read(dir.join(&entry.file))?;
            let n: usize = entry.shape.iter().product();
            if bytes.len() != n * 8 {
                return Err(NumericsError::Checkpoint(format!(
                    "{}: expected {} bytes for shape {:?}, found {}",
                    entry.name,
                    n * 8,
                    entry.shape,
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", entry.name)))?;
            store.insert(entry.name.clone(), t);
        }
        let id = store.checkpoint_id();
        if id != manifest.checkpoint_id {
            return Err(NumericsError::Checkpoint(format!(
                "checksum mismatch: manifest {} vs content {id}",
                manifest.checkpoint_id
            )));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.25, 1e-300]));
        p.insert("b", Tensor::vector(vec![0.5, -0.0]));
        p
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample();
        let id = p.save(dir.path()).unwrap();
        let q = ParamStore::load(dir.path()).unwrap();
        assert_eq!(q.checkpoint_id(), id);
        for (name, t) in p.iter() {
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = q.get(name).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, bits2);
        }
    }

    #[test]
    fn load_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let f = dir.path().join("w.f64");
        let mut bytes = std::fs::read(&f).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&f, &bytes).unwrap();
        assert!(matches!(
            ParamStore::load(dir.path()),
            Err(NumericsError::Checkpoint(_))
        ));

        std::fs::write(&f, &bytes[..8]).unwrap();
        assert!(matches!(
            ParamStore::load(dir.path()),
            Err(NumericsError::Checkpoint(_))
        ));
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut p = sample();
        let d = Tensor::vector(vec![1.0, 2.0]);
        p.accumulate_grad("b", &d).unwrap();
        p.accumulate_grad("b", &d).unwrap();
        assert_eq!(p.grad("b").data(), &[2.0, 4.0]);
        assert!(p.accumulate_grad("b", &Tensor::scalar(1.0)).is_err());
        p.zero_grad();
        assert_eq!(p.grad("b").data(), &[0.0, 0.0]);
    }

    #[test]
    fn checkpoint_id_tracks_content() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.checkpoint_id(), b.checkpoint_id());
        b.value_mut("b").data_mut()[0] = 0.5000000001;
        assert_ne!(a.checkpoint_id(), b.checkpoint_id());
    }
}
