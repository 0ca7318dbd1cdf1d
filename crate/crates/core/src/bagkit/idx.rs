use std::fs;
use std::io::{self, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use super::{InstanceDataset, InstanceKind};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently inflating it when it starts with the gzip
/// magic bytes.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(path, "IDX header"))
}

/// Parses an IDX file with the expected magic; returns its extents and
/// the raw u8 payload.
fn parse_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_maybe_gzip(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "{}: IDX magic {magic:#010x}, expected {expected_magic:#010x}",
            path.display()
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(&bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let n: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + n)
        .ok_or_else(|| truncated(path, "IDX payload"))?;
    Ok((dims, payload.to_vec()))
}

/// Reads a u8 label file (magic 0x00000801).
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let (_, payload) = parse_idx(path.as_ref(), LABELS_MAGIC)?;
    Ok(payload.into_iter().map(u32::from).collect())
}

/// Reads an IDX image file (magic 0x00000803) and optional label file.
/// Pixels are scaled to [0, 1]; each image becomes a 1×h×w instance.
pub fn read_idx(
    images_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
) -> Result<InstanceDataset> {
    let images_path = images_path.as_ref();
    let (dims, payload) = parse_idx(images_path, IMAGES_MAGIC)?;
    let (n, height, width) = (dims[0], dims[1], dims[2]);
    let labels = labels_path.map(read_idx_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != n {
            return Err(Error::Consistency(format!(
                "{} holds {n} images but the label file holds {} labels",
                images_path.display(),
                l.len()
            )));
        }
    }
    let values = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let source_id = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    InstanceDataset::new(
        source_id,
        InstanceKind::Image {
            channels: 1,
            height,
            width,
        },
        values,
        labels,
    )
}
