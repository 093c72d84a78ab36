//! Binary parameter files.
//!
//! Layout, all integers little-endian: magic `CSUM`, version `u32`, entry
//! count `u32`, then per entry the name length `u16`, the UTF-8 name, the
//! rank `u8`, each dimension as `u64`, and the values as row-major `f64`.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"CSUM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a checkpoint (bad magic bytes {found:?})")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("{path}: corrupt entry {index}: {reason}")]
    Corrupt { path: PathBuf, index: usize, reason: String },
    #[error("{path}: trailing bytes after the last entry")]
    TrailingBytes { path: PathBuf },
    #[error("entry name {0:?} is too long")]
    NameTooLong(String),
}

pub fn encode(entries: &[(&str, &Tensor)]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::NameTooLong(name.to_string()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?))
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    let corrupt =
        |index: usize, reason: &str| CheckpointError::Corrupt { path: path.into(), index, reason: reason.into() };
    let magic = c.take(4).ok_or_else(|| corrupt(0, "file shorter than the header"))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.into(), found: magic.try_into().expect("4 bytes") });
    }
    let version = c.u32().ok_or_else(|| corrupt(0, "truncated header"))?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { path: path.into(), found: version });
    }
    let count = c.u32().ok_or_else(|| corrupt(0, "truncated header"))? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let truncated = || corrupt(i, "truncated");
        let len = c.u16().ok_or_else(truncated)? as usize;
        let name =
            std::str::from_utf8(c.take(len).ok_or_else(truncated)?).map_err(|_| corrupt(i, "name is not UTF-8"))?;
        let rank = c.take(1).ok_or_else(truncated)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64().ok_or_else(truncated)?).map_err(|_| corrupt(i, "dimension overflow"))?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(i, "size overflow"))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, values).map_err(|e| corrupt(i, &e.to_string()))?;
        out.push((name.to_string(), t));
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes { path: path.into() });
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    let bytes = encode(entries)?;
    let io_err = |source| CheckpointError::Io { path: path.into(), source };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.into(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    decode(&bytes, path)
}

/// Sibling path for optimizer state: `checkpoint.bin` → `checkpoint.opt.bin`.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.opt.bin"))
}
