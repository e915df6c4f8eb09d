//! `DUWT` upsampler checkpoints.
//!
//! Layout: magic `DUWT`, version `u32`, then the config block (`d`, `w_att`,
//! `s` as `u32`; RoPE base and initial last-layer bias as `f64`; layer count
//! `u32` followed by kernel size and output width per layer as `u32`), then
//! every parameter tensor in declaration order as little-endian `f64`.
//! Tensor shapes follow from the config block.

use std::path::Path;

use comfield_core::upsampler::{UpsamplerConfig, UpsamplerParams};
use comfield_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"DUWT";
pub const VERSION: u32 = 1;

pub fn encode(cfg: &UpsamplerConfig, params: &UpsamplerParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    put(&mut out, VERSION);
    put(&mut out, cfg.guidance_dim as u32);
    put(&mut out, cfg.attention_window as u32);
    put(&mut out, cfg.ratio as u32);
    out.extend_from_slice(&cfg.rope_base.to_le_bytes());
    out.extend_from_slice(&cfg.init_bias.to_le_bytes());
    let shapes = cfg.layer_shapes();
    put(&mut out, shapes.len() as u32);
    for (k, _, o) in shapes {
        put(&mut out, k as u32);
        put(&mut out, o as u32);
    }
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.at + n > self.bytes.len() {
            return Err(format!("truncated at byte {} (need {n} more)", self.at));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(UpsamplerConfig, UpsamplerParams), String> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let guidance_dim = r.u32()? as usize;
    let attention_window = r.u32()? as usize;
    let ratio = r.u32()? as usize;
    let rope_base = r.f64()?;
    let init_bias = r.f64()?;
    let layers = r.u32()? as usize;
    if layers == 0 || layers > 64 {
        return Err(format!("implausible layer count {layers}"));
    }
    let mut kernel_sizes = Vec::with_capacity(layers);
    let mut widths = Vec::with_capacity(layers);
    for _ in 0..layers {
        kernel_sizes.push(r.u32()? as usize);
        widths.push(r.u32()? as usize);
    }
    if widths.last() != Some(&guidance_dim) {
        return Err("last layer width differs from the guidance dimension".into());
    }
    widths.pop();
    let cfg = UpsamplerConfig {
        guidance_dim,
        attention_window,
        ratio,
        rope_base,
        kernel_sizes,
        hidden_widths: widths,
        init_bias,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let mut tensors = Vec::new();
    for (k, cin, cout) in cfg.layer_shapes() {
        for shape in [vec![k, k, cin, cout], vec![cout]] {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            tensors.push(Tensor::new(&shape, data).map_err(|e| e.to_string())?);
        }
    }
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    let params = UpsamplerParams::from_tensors(&cfg, tensors).map_err(|e| e.to_string())?;
    Ok((cfg, params))
}

pub fn write_checkpoint(path: &Path, cfg: &UpsamplerConfig, params: &UpsamplerParams) -> Result<()> {
    fsio::write_atomic(path, &encode(cfg, params))
}

pub fn read_checkpoint(path: &Path) -> Result<(UpsamplerConfig, UpsamplerParams)> {
    decode(&fsio::read(path)?).map_err(|e| HarnessError::malformed(path, e))
}
