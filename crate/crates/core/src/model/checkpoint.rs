//! `MILC` model checkpoints.
//!
//! Layout (little-endian): `b"MILC"`, u8 version, u32 header length, JSON
//! header, u32 tensor count, then per tensor a u16 name length, the UTF-8
//! name and the tensor in its binary encoding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MilModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &[u8; 4] = b"MILC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: ModelConfig,
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub input_shape: Vec<usize>,
    pub dtype: DType,
    pub seed: u64,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.at..]
    }
}

fn parse_header(cur: &mut Cursor) -> Result<CheckpointHeader> {
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a MILC checkpoint".into()));
    }
    let version = cur.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(cur.take(4, "header length")?.try_into().unwrap()) as usize;
    let json = cur.take(len, "header")?;
    serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))
}

/// Reads only the header, e.g. to pick the element type before loading.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&mut Cursor { bytes: &bytes, at: 0 })
}

impl<T: Element> MilModel<T> {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            architecture: self.config.clone(),
            embed_dim: self.embed_dim(),
            attention_dim: self.config.attention_dim,
            input_shape: self.input_shape(),
            dtype: T::DTYPE,
            seed: self.seed,
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serialises");
        let mut out = MAGIC.to_vec();
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write_binary(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        let header = parse_header(&mut cur)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {:?} weights, {:?} requested",
                header.dtype,
                T::DTYPE
            )));
        }
        header.architecture.validate()?;
        if header.embed_dim != header.architecture.embedder.embed_dim()
            || header.attention_dim != header.architecture.attention_dim
            || header.input_shape != header.architecture.embedder.input_shape()
        {
            return Err(Error::Format("checkpoint header dimensions disagree with its architecture".into()));
        }
        let layout = header.architecture.parameter_layout();
        let count = u32::from_le_bytes(cur.take(4, "tensor count")?.try_into().unwrap()) as usize;
        if count != layout.len() {
            return Err(Error::Format(format!(
                "architecture expects {} tensors, checkpoint holds {count}",
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (name, shape, _) in &layout {
            let n = u16::from_le_bytes(cur.take(2, "tensor name length")?.try_into().unwrap()) as usize;
            let got = std::str::from_utf8(cur.take(n, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::Format(format!("expected tensor {name}, found {got}")));
            }
            // Check the declared shape before the payload is allocated.
            let head = cur.rest();
            let declared: Option<Vec<usize>> = (head.len() >= 2).then(|| {
                let nd = head[1] as usize;
                (0..nd)
                    .map_while(|i| head.get(2 + 8 * i..10 + 8 * i))
                    .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
                    .collect()
            });
            if declared.as_deref() != Some(shape.as_slice()) {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {declared:?}, architecture expects {shape:?}"
                )));
            }
            let size = 2 + 8 * shape.len() + shape.iter().product::<usize>() * T::DTYPE.size();
            let chunk = cur.take(size, name)?;
            params.push((name.clone(), Tensor::<T>::read_binary(chunk)?));
        }
        if !cur.rest().is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                cur.rest().len()
            )));
        }
        Self::from_parts(header.architecture, header.seed, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmbedderConfig;

    fn small() -> MilModel<f32> {
        let cfg = ModelConfig::new(
            EmbedderConfig::Conv28 {
                conv1_channels: 2,
                conv2_channels: 3,
                kernel: 5,
                embed_dim: 6,
            },
            4,
        );
        MilModel::init(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.milc");
        m.save(&p).unwrap();
        let back = MilModel::<f32>::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_bytes(), fs::read(&p).unwrap());
        assert_eq!(read_checkpoint_header(&p).unwrap().dtype, DType::F32);

        let x = Tensor::<f32>::full([1, 28, 28], 0.3);
        let a = m.forward(std::slice::from_ref(&x)).unwrap().logits;
        let b = back.forward(&[x]).unwrap().logits;
        assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let m = small();
        let mut bytes = m.to_checkpoint_bytes();
        // corrupt the first extent of the first tensor
        let needle = b"embedder.conv1.weight";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len();
        bytes[at + 2] = 9;
        let err = MilModel::<f32>::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("embedder.conv1.weight"), "{err}");
    }

    #[test]
    fn wrong_dtype_truncation_and_magic_are_rejected() {
        let bytes = small().to_checkpoint_bytes();
        assert!(matches!(MilModel::<f64>::from_checkpoint_bytes(&bytes), Err(Error::Format(_))));
        assert!(MilModel::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MilModel::<f32>::from_checkpoint_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(MilModel::<f32>::from_checkpoint_bytes(&long).is_err());
    }
}
