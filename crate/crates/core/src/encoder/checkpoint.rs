//! Model checkpoint file.
//!
//! ```text
//! "CUTSMDL1"
//! u32 LE format version
//! u32 LE length, then that many bytes of JSON-encoded ArchSpec
//! for each tensor (layer 0 weight, layer 0 bias, ..., head weight, head bias):
//!     u32 LE rank, rank x u32 LE dims, f32 LE payload
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ArchSpec, EncoderParams};

pub const MODEL_MAGIC: &[u8; 8] = b"CUTSMDL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes in model file")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("tensor {index} has shape {got:?}, architecture implies {expected:?}")]
    ShapeMismatch { index: usize, expected: Vec<usize>, got: Vec<usize> },
    #[error("bad architecture record: {0}")]
    Arch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(params: &EncoderParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(&params.arch).expect("ArchSpec serializes");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    for (shape, tensor) in params.tensor_shapes().iter().zip(params.tensors()) {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<EncoderParams<f32>, CheckpointError> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(8).map_err(|_| CheckpointError::BadMagic)? != MODEL_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = cur.u32()? as usize;
    let arch: ArchSpec = serde_json::from_slice(cur.take(len)?).map_err(|e| CheckpointError::Arch(e.to_string()))?;
    let mut params = EncoderParams::<f32>::zeros(&arch).map_err(|e| CheckpointError::Arch(e.to_string()))?;
    let shapes = params.tensor_shapes();
    for (index, (expected, tensor)) in shapes.into_iter().zip(params.tensors_mut()).enumerate() {
        let rank = cur.u32()? as usize;
        let got = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if got != expected {
            return Err(CheckpointError::ShapeMismatch { index, expected, got });
        }
        let payload = cur.take(4 * tensor.len())?;
        for (v, b) in tensor.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    Ok(params)
}

pub fn save(params: &EncoderParams<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<EncoderParams<f32>, CheckpointError> {
    decode(&fs::read(path)?)
}
