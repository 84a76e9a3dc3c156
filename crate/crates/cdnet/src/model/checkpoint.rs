//! Checkpoint container: one text manifest plus a single little-endian float
//! payload. Round-trips are bit-exact.
//!
//! Layout:
//! ```text
//! CDNET-CHECKPOINT-V1\n
//! <manifest JSON, one line>\n
//! <raw little-endian float payload>
//! ```
//! The manifest records the model config (d, J, variant, class counts, seed)
//! and, per parameter, its name, shape, dtype and byte offset into the
//! payload, in registration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, Shape, Tensor, DTYPE};

const MAGIC: &str = "CDNET-CHECKPOINT-V1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Shape,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

/// Serialized model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config,
            entries: model
                .store
                .iter()
                .map(|(_, name, tensor)| (name.to_string(), tensor.clone()))
                .collect(),
        }
    }

    /// Rebuild a model: construct the architecture from the stored config,
    /// then overwrite every tensor from the checkpoint.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::build(self.config)?;
        if model.store.len() != self.entries.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters for this config, checkpoint has {}",
                model.store.len(),
                self.entries.len()
            )));
        }
        for (name, tensor) in self.entries {
            let id = model.store.id_by_name(&name).ok_or_else(|| {
                Error::CheckpointMismatch(format!("unknown parameter `{name}` in checkpoint"))
            })?;
            if model.store.get(id).shape() != tensor.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{name}`: expected {}, checkpoint has {}",
                    model.store.get(id).shape(),
                    tensor.shape()
                )));
            }
            *model.store.get_mut(id) = tensor;
        }
        Ok(model)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<u8> = Vec::new();
        let mut params = Vec::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            let offset = payload.len();
            for v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            params.push(ManifestEntry {
                name: name.clone(),
                shape: tensor.shape(),
                dtype: DTYPE.to_string(),
                offset,
                len: tensor.len(),
            });
        }
        let manifest = Manifest { config: self.config, params };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&manifest).expect("manifest json").as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("checkpoint: {what}"));
        let magic_end = MAGIC.len();
        if bytes.len() < magic_end + 1 || &bytes[..magic_end] != MAGIC.as_bytes() {
            return Err(bad("missing magic header"));
        }
        let rest = &bytes[magic_end + 1..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing manifest line"))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..nl])
            .map_err(|e| bad(&format!("manifest parse error: {e}")))?;
        let payload = &rest[nl + 1..];

        let float_size = std::mem::size_of::<Real>();
        let mut entries = Vec::with_capacity(manifest.params.len());
        for entry in manifest.params {
            if entry.dtype != DTYPE {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{}` stored as {}, this build uses {DTYPE}",
                    entry.name, entry.dtype
                )));
            }
            let start = entry.offset;
            let end = start + entry.len * float_size;
            if end > payload.len() {
                return Err(bad(&format!("payload truncated at parameter `{}`", entry.name)));
            }
            let data: Vec<Real> = payload[start..end]
                .chunks_exact(float_size)
                .map(|c| Real::from_le_bytes(c.try_into().expect("chunk size")))
                .collect();
            if entry.shape.len() != data.len() {
                return Err(bad(&format!("shape/len mismatch for `{}`", entry.name)));
            }
            let tensor = Tensor::from_parts(data, entry.shape, "checkpoint payload")?;
            entries.push((entry.name, tensor));
        }
        Ok(Checkpoint { config: manifest.config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint; the fingerprint recorded in
    /// evaluation reports.
    pub fn hash(&self) -> String {
        checkpoint_hash(&self.to_bytes())
    }
}

/// Hex SHA-256 of checkpoint bytes.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn model() -> Model {
        Model::build(ModelConfig {
            raw_dim: 6,
            d: 4,
            c_e: 3,
            c_d: 2,
            j: 2,
            variant: Variant::Sequential,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = m.to_checkpoint().to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(restored.to_bytes(), bytes);
        let m2 = restored.into_model().unwrap();
        for (id, name, tensor) in m.store.iter() {
            let other = m2.store.get(m2.store.id_by_name(name).unwrap());
            assert_eq!(tensor.data(), other.data(), "parameter {name} ({id:?})");
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = model().to_checkpoint().to_bytes();
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(Checkpoint::from_bytes(b"NOT-A-CHECKPOINT\n{}\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let m = model();
        let h1 = m.to_checkpoint().hash();
        let h2 = m.to_checkpoint().hash();
        assert_eq!(h1, h2);
        let mut m3 = model();
        let id = m3.store.id_by_name("encoder.b1").unwrap();
        m3.store.get_mut(id).data_mut()[0] = 1.0;
        assert_ne!(m3.to_checkpoint().hash(), h1);
    }
}
