use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bag, BagDataset, BagSpec, InstanceDataset, Role};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    source_id: String,
    role: Role,
    spec: BagSpec,
    bags: Vec<Bag>,
}

impl BagDataset {
    /// Compact JSON encoding; identical datasets give identical bytes.
    pub fn to_manifest_bytes(&self) -> Vec<u8> {
        let m = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            source_id: self.source_id.clone(),
            role: self.role,
            spec: self.spec.clone(),
            bags: self.bags.clone(),
        };
        let mut out = serde_json::to_vec(&m).expect("manifest serialises");
        out.push(b'\n');
        out
    }

    pub fn from_manifest_bytes(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::Format(format!("bag manifest at {}: {}", e.path(), e.inner()))
        })?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "bag manifest at format_version: unsupported version {}",
                m.format_version
            )));
        }
        Ok(Self {
            source_id: m.source_id,
            role: m.role,
            spec: m.spec,
            bags: m.bags,
        })
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_manifest_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest without checking it against a pool.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest_bytes(&bytes)
    }

    /// Loads a manifest and validates every bag against `src`.
    pub fn load_validated(path: impl AsRef<Path>, src: &InstanceDataset) -> Result<Self> {
        let ds = Self::load_manifest(path)?;
        ds.validate(src)?;
        Ok(ds)
    }
}
