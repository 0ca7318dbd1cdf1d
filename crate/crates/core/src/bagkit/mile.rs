//! `MILE` container for precomputed instance embeddings.
//!
//! Layout (little-endian): `b"MILE"`, u8 version (1), u8 flags (bit 0:
//! labels present), u64 count, u32 dim, count·dim f32 row-major values,
//! then count u32 labels when flagged.

use std::fs;
use std::path::Path;

use super::{InstanceDataset, InstanceKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MILE";
const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 1 + 8 + 4;

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<InstanceDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(fail("missing MILE magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported MILE version {}", bytes[4])));
    }
    let has_labels = bytes[5] & 1 == 1;
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let n_values = count
        .checked_mul(dim)
        .ok_or_else(|| fail("count·dim overflows".into()))?;
    let expected = HEADER + 4 * n_values + if has_labels { 4 * count } else { 0 };
    if bytes.len() != expected {
        return Err(fail(format!(
            "count {count} × dim {dim} needs {expected} bytes, file holds {}",
            bytes.len()
        )));
    }
    if dim == 0 {
        return Err(fail("embedding dimension is zero".into()));
    }
    let body = &bytes[HEADER..];
    let values = body[..4 * n_values]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = has_labels.then(|| {
        body[4 * n_values..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    InstanceDataset::new(source_id, InstanceKind::Vector { dim }, values, labels)
}

/// Writes a vector-kind dataset as a `MILE` container.
pub fn write_embeddings(ds: &InstanceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let InstanceKind::Vector { dim } = ds.kind() else {
        return Err(Error::Contract(
            "MILE containers hold vector instances only".into(),
        ));
    };
    let mut out = Vec::with_capacity(HEADER + 4 * ds.len() * (dim + 1));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(u8::from(ds.labels().is_some()));
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for i in 0..ds.len() {
        for v in ds.instance_values(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = ds.labels() {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
