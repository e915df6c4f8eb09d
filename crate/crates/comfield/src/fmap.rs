//! `FMAP` feature map files.
//!
//! Layout: magic `FMAP`, version `u32`, `H`, `W`, `C` as `u32`, dtype code
//! `u8` (0 is 64-bit little-endian float), then `H·W·C` row-major values.
//! All integers are little-endian.

use std::path::Path;

use comfield_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;
const HEADER: usize = 4 + 4 * 4 + 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FmapError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("map must be H × W × C")]
    Rank,
}

pub fn encode(f: &Tensor) -> std::result::Result<Vec<u8>, FmapError> {
    let (h, w, c) = match *f.shape() {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        _ => return Err(FmapError::Rank),
    };
    let mut out = Vec::with_capacity(HEADER + 8 * f.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F64);
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, FmapError> {
    if bytes.len() < HEADER {
        return Err(FmapError::Truncated { expected: HEADER, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FmapError::BadMagic(magic));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(FmapError::Version(version));
    }
    let (h, w, c) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize);
    let dtype = bytes[20];
    if dtype != DTYPE_F64 {
        return Err(FmapError::Dtype(dtype));
    }
    let n = h * w * c;
    let expected = HEADER + 8 * n;
    if bytes.len() < expected {
        return Err(FmapError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FmapError::Trailing(bytes.len() - expected));
    }
    let data = bytes[HEADER..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok(Tensor::new(&[h, w, c], data).expect("length checked"))
}

pub fn write_fmap(path: &Path, f: &Tensor) -> Result<()> {
    let bytes = encode(f).map_err(|e| HarnessError::malformed(path, e.to_string()))?;
    fsio::write_atomic(path, &bytes)
}

pub fn read_fmap(path: &Path) -> Result<Tensor> {
    decode(&fsio::read(path)?).map_err(|e| HarnessError::malformed(path, e.to_string()))
}
