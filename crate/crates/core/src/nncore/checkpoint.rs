//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "HIAMCKPT"
//! version      u32       CHECKPOINT_VERSION
//! manifest_len u32
//! manifest     manifest_len bytes of UTF-8 JSON
//! count        u32       number of parameters
//! per parameter, in registration order:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows * cols f64, row-major
//! ```
//!
//! Writes go to a sibling temporary file that is renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParameterSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HIAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(manifest: &serde_json::Value, params: &ParameterSet) -> Vec<u8> {
    let manifest = serde_json::to_vec(manifest).expect("JSON values always serialize");
    let mut buf = Vec::with_capacity(64 + manifest.len() + params.scalar_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for x in value.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated archive at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(serde_json::Value, ParameterSet)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = r.u32()? as usize;
    let manifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let values = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let value = Array2::from_shape_vec((rows, cols), values).expect("length matches shape");
        params.insert(name, value)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((manifest, params))
}

pub fn save_checkpoint(path: &Path, manifest: &serde_json::Value, params: &ParameterSet) -> Result<()> {
    let bytes = encode_checkpoint(manifest, params);
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).and_then(|_| file.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParameterSet)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
