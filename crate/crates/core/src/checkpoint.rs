//! Versioned binary container for model parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RCTCCKPT" | u32 version
//! u32 len | alphabet hash (ASCII hex)
//! u32 len | ModelConfig as JSON
//! u32 tensor count
//! per tensor: u32 len | name | u32 rank | u64 dims... | f32 values, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::codec::Alphabet;
use crate::network::{ModelConfig, ModelParams, NetworkError};

pub const MAGIC: &[u8; 8] = b"RCTCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint alphabet {found} does not match {expected}")]
    AlphabetMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("bad model config record: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in checkpoint")]
    UnknownTensor(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub alphabet_hash: String,
    pub params: ModelParams,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

/// Serializes parameters. Values are stored as `f32`.
pub fn to_bytes(params: &ModelParams, alphabet_hash: &str) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_bytes(&mut out, alphabet_hash.as_bytes());
    put_bytes(&mut out, &serde_json::to_vec(&params.config)?);
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for t in &tensors {
        put_bytes(&mut out, t.name.as_bytes());
        put_u32(&mut out, t.view.ndim() as u32);
        for &d in t.view.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.view.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes };
    if cur.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let alphabet_hash = cur.string()?.to_owned();
    let config: ModelConfig = serde_json::from_str(cur.string()?)?;
    let mut params = ModelParams::zeros(&config)?;
    let count = cur.u32()? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} tensors, config implies {}",
            tensors.len()
        )));
    }
    for slot in tensors.iter_mut() {
        let name = cur.string()?;
        if name != slot.name {
            return Err(if tensors_named(&config, name) {
                CheckpointError::Malformed(format!("tensor {name} out of order"))
            } else {
                CheckpointError::UnknownTensor(name.to_owned())
            });
        }
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims != slot.view.shape() {
            return Err(CheckpointError::TensorShape {
                name: name.to_owned(),
                expected: slot.view.shape().to_vec(),
                found: dims,
            });
        }
        let raw = cur.take(slot.view.len() * 4)?;
        for (dst, chunk) in slot.view.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    drop(tensors);
    if !cur.bytes.is_empty() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint {
        alphabet_hash,
        params,
    })
}

fn tensors_named(config: &ModelConfig, name: &str) -> bool {
    ModelParams::zeros(config)
        .map(|p| p.tensors().iter().any(|t| t.name == name))
        .unwrap_or(false)
}

pub fn save(path: &Path, params: &ModelParams, alphabet: &Alphabet) -> Result<(), CheckpointError> {
    let bytes = to_bytes(params, &alphabet.hash())?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

/// Reads a checkpoint without checking its alphabet.
pub fn read(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Reads a checkpoint and rejects it unless it was trained for `alphabet`.
pub fn load(path: &Path, alphabet: &Alphabet) -> Result<ModelParams, CheckpointError> {
    let ckpt = read(path)?;
    let expected = alphabet.hash();
    if ckpt.alphabet_hash != expected {
        return Err(CheckpointError::AlphabetMismatch {
            expected,
            found: ckpt.alphabet_hash,
        });
    }
    Ok(ckpt.params)
}
