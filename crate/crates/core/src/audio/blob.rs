//! Flat feature dump: `"SPEC"`, `u32 n_mels`, `u32 n_frames`, `u32 dtype`,
//! then row-major little-endian `f32` values.

use std::path::Path;

use super::{AudioError, Spectrogram};
use crate::tensor::DTYPE_F32;

pub const SPEC_MAGIC: &[u8; 4] = b"SPEC";
const HEADER_LEN: usize = 16;

pub fn write_spec_blob(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * spec.values.len());
    bytes.extend_from_slice(SPEC_MAGIC);
    bytes.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    bytes.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in &spec.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a blob written by [`write_spec_blob`]. The hop is not stored, so the
/// caller supplies it.
pub fn read_spec_blob(path: impl AsRef<Path>, frame_hop_s: f64) -> Result<Spectrogram, AudioError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |detail: String| AudioError::Blob {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != SPEC_MAGIC {
        return Err(bad("missing SPEC header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (n_mels, n_frames, dtype) = (word(4) as usize, word(8) as usize, word(12));
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype tag {dtype}")));
    }
    let expected = HEADER_LEN + 4 * n_mels * n_frames;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Spectrogram::new(values, n_mels, n_frames, frame_hop_s))
}
