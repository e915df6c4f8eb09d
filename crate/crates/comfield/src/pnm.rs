//! Binary PPM (`P6`) and PGM (`P5`) rasters with maxval 255.

use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut at = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported magic {m:?}")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported"));
    }
    let n = width * height * channels;
    let payload = bytes.get(at..).unwrap_or(&[]);
    if payload.len() < n {
        return Err(format!("truncated payload: expected {n} bytes, found {}", payload.len()));
    }
    Ok(Raster { width, height, channels, data: payload[..n].to_vec() })
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    if r.data.len() != r.width * r.height * r.channels || !(r.channels == 1 || r.channels == 3) {
        return Err(HarnessError::config(format!("raster data does not match {}×{}×{}", r.width, r.height, r.channels)));
    }
    fsio::write_atomic(path, &encode(r))
}

pub fn read(path: &Path) -> Result<Raster> {
    decode(&fsio::read(path)?).map_err(|e| HarnessError::malformed(path, e))
}
