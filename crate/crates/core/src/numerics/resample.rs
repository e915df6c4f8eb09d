//! Spatial resampling of `H × W × C` grids.

use alloc::vec;
use alloc::vec::Vec;

use super::{FeatureMap, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Bilinear resize with half-pixel sample centers and edge clamping.
pub fn resize_bilinear(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    let (h, w, c) = f.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot resize an empty map"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(f.clone());
    }
    let mut out = vec![0.0; out_h * out_w * c];
    let axis = |dst: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = math::floor(src) as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    for y in 0..out_h {
        let (y0, y1, ty) = axis(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, tx) = axis(x, out_w, w);
            let o = (y * out_w + x) * c;
            let (a, b, cc, d) = (f.pixel(y0, x0), f.pixel(y0, x1), f.pixel(y1, x0), f.pixel(y1, x1));
            for k in 0..c {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bot = cc[k] + (d[k] - cc[k]) * tx;
                out[o + k] = top + (bot - top) * ty;
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

/// Non-overlapping `factor × factor` mean pooling.
pub fn downsample_box(f: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    let (h, w, c) = f.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape("extent not divisible by pooling factor"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow * c];
    let inv = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let o = ((y / factor) * ow + x / factor) * c;
            for (k, v) in f.pixel(y, x).iter().enumerate() {
                out[o + k] += v * inv;
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Crop rows `y0..y0+h`, columns `x0..x0+w`.
pub fn crop(f: &FeatureMap, y0: usize, x0: usize, h: usize, w: usize) -> Result<FeatureMap> {
    let (fh, fw, c) = f.dims3()?;
    if y0 + h > fh || x0 + w > fw {
        return Err(Error::shape("crop window exceeds map"));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            out.extend_from_slice(f.pixel(y, x));
        }
    }
    Tensor::new(&[h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_and_constant() {
        let f = Tensor::from_fn(&[3, 4, 2], |i| i as f64);
        assert_eq!(resize_bilinear(&f, 3, 4).unwrap(), f);
        let c = Tensor::full(&[2, 2, 3], 0.7);
        let up = resize_bilinear(&c, 8, 8).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn bilinear_linear_ramp_interior() {
        // Ramp in x is reproduced exactly away from the clamped border.
        let f = Tensor::from_fn(&[1, 4, 1], |i| i as f64);
        let up = resize_bilinear(&f, 1, 8).unwrap();
        assert!((up.data()[3] - 1.25).abs() < 1e-12);
        assert_eq!(up.data()[0], 0.0);
    }

    #[test]
    fn box_pool_quadrants() {
        let f = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
        let p = downsample_box(&f, 2).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(downsample_box(&f, 3).is_err());
    }
}
