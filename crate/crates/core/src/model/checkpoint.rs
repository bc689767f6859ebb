//! Binary checkpoint format.
//!
//! ```text
//! "TELC" | u32 version | u32 len | header (TOML: model config + class names)
//! | u32 n_params | per param: u32 name_len, name, u32 ndim, u32 dims.., u32 dtype, payload
//! | u32 CRC32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::tensor::{Float, Tensor, DTYPE_F32, DTYPE_F64};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TELC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match expectation: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    class_names: Vec<String>,
    model: ModelConfig,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint<T: Float>(model: &Model<T>) -> Vec<u8> {
    let header = toml::to_string(&Header {
        class_names: model.class_names.clone(),
        model: model.config.clone(),
    })
    .expect("model config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        put_u32(&mut out, T::DTYPE_TAG);
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn save_checkpoint<T: Float>(
    model: &Model<T>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_values<T: Float>(raw: &[u8], dtype: u32) -> Vec<T> {
    match dtype {
        DTYPE_F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        _ => raw
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    }
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Model<T>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 8,
    };
    let header_len = cur.u32()? as usize;
    let header = std::str::from_utf8(cur.take(header_len)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let header: Header =
        toml::from_str(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let n_params = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let dtype = cur.u32()?;
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            other => {
                return Err(CheckpointError::Header(format!(
                    "parameter {name}: unknown dtype {other}"
                )))
            }
        };
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * width)?;
        let value = Tensor::new(shape, read_values(raw, dtype))
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        params.push((name, value));
    }
    if cur.pos != body.len() {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes",
            body.len() - cur.pos
        )));
    }
    Ok(Model::from_params(
        header.model,
        header.class_names,
        params,
    )?)
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<Model<T>, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists on a particular class count.
pub fn load_checkpoint_expecting<T: Float>(
    path: impl AsRef<Path>,
    n_classes: usize,
) -> Result<Model<T>, CheckpointError> {
    let model = load_checkpoint(path)?;
    if model.config.n_classes != n_classes {
        return Err(CheckpointError::ConfigMismatch(format!(
            "checkpoint has {} classes, expected {n_classes}",
            model.config.n_classes
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvBlock;

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            conv_blocks: vec![ConvBlock::new(3, 3, 1, 2)],
            embedding_dim: 4,
            n_classes: 3,
            l2_lambda: 1e-4,
            l2_conv: false,
            normalize_embeddings: true,
            input_shape: (8, 10),
        };
        Model::init(cfg, 42)
            .unwrap()
            .with_class_names(vec!["af".into(), "en".into(), "zu".into()])
            .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let m = model();
        save_checkpoint(&m, &a).unwrap();
        let loaded: Model<f32> = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, m);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = encode_checkpoint(&model());
        let i = bytes.len() - 10;
        bytes[i] ^= 0x40;
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(CheckpointError::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_and_version_detected() {
        let bytes = encode_checkpoint(&model());
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() / 2]).is_err());
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..2]),
            Err(CheckpointError::Truncated)
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_checkpoint::<f32>(&v2),
            Err(CheckpointError::VersionMismatch { found: 2, .. })
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f32>(&magic),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn class_count_expectation_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &p).unwrap();
        assert!(load_checkpoint_expecting::<f32>(&p, 3).is_ok());
        assert!(matches!(
            load_checkpoint_expecting::<f32>(&p, 4),
            Err(CheckpointError::ConfigMismatch(_))
        ));
    }
}
