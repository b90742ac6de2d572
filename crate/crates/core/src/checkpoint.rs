//! Binary adaptor checkpoints.
//!
//! Layout: `MACCAPCK`, `u32` format version, `u32` header length, the JSON
//! header, then every tensor as `u32` rows, `u32` cols and row-major `f64`
//! values (all little-endian) in header order, then the SHA-256 of every
//! preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptor::{AdaptorConfig, AdaptorParams, NoiseConfig};
use crate::autodiff::Mat;
use crate::error::{MacCapError, Result};
use crate::nn::TensorMap;

const MAGIC: &[u8; 8] = b"MACCAPCK";
pub const FORMAT_VERSION: u32 = 1;

/// Hashes of the frozen components a checkpoint was trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compatibility {
    pub backbone_hash: String,
    pub lm_hash: String,
    pub vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub compat: Compatibility,
    pub adaptor: AdaptorConfig,
    pub noise: NoiseConfig,
    pub tensors: Vec<String>,
}

pub fn save_checkpoint(
    params: &AdaptorParams,
    compat: &Compatibility,
    noise: &NoiseConfig,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        compat: compat.clone(),
        adaptor: params.config().clone(),
        noise: *noise,
        tensors: params.tensors().keys().cloned().collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for t in params.tensors().values() {
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    // Write-then-rename so readers never observe a partial file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| MacCapError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| MacCapError::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| MacCapError::Format("checkpoint is truncated".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint without checking what it was trained against.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, AdaptorParams)> {
    let data = std::fs::read(path).map_err(|e| MacCapError::io(path, e))?;
    if data.len() < MAGIC.len() + 8 + 32 || &data[..MAGIC.len()] != MAGIC {
        return Err(MacCapError::Format("not an adaptor checkpoint".into()));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    let mut r = Reader { data: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(MacCapError::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| MacCapError::Format(format!("bad checkpoint header: {e}")))?;
    if Sha256::digest(body).as_slice() != digest {
        return Err(MacCapError::Format("checkpoint checksum mismatch (corrupt or truncated)".into()));
    }
    let mut tensors = TensorMap::new();
    for name in &header.tensors {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| MacCapError::Format("tensor size overflow".into()))?;
        if n > (body.len() - r.pos) / 8 {
            return Err(MacCapError::Format(format!("tensor {name} is truncated")));
        }
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let m = Mat::from_shape_vec((rows, cols), values).expect("sizes checked");
        tensors.insert(name.clone(), m);
    }
    if r.pos != body.len() {
        return Err(MacCapError::Format("trailing bytes after tensors".into()));
    }
    let params = AdaptorParams::from_tensors(header.adaptor.clone(), tensors)
        .map_err(|e| MacCapError::Format(format!("checkpoint tensors: {e}")))?;
    Ok((header, params))
}

/// Reads a checkpoint and rejects it unless it matches `expected`.
pub fn load_checkpoint(path: &Path, expected: &Compatibility) -> Result<(CheckpointHeader, AdaptorParams)> {
    let (header, params) = read_checkpoint(path)?;
    let c = &header.compat;
    for (what, got, want) in [
        ("backbone", &c.backbone_hash, &expected.backbone_hash),
        ("language model", &c.lm_hash, &expected.lm_hash),
        ("vocabulary", &c.vocab_hash, &expected.vocab_hash),
    ] {
        if got != want {
            return Err(MacCapError::IncompatibleCheckpoint(format!(
                "{what} hash {} does not match {}",
                short(got),
                short(want)
            )));
        }
    }
    Ok((header, params))
}

fn short(h: &str) -> &str {
    &h[..h.len().min(16)]
}
