//! Image-guided feature upsampler.
//!
//! A small stride-1 convolutional encoder turns the high-resolution image
//! into a `d`-channel guidance map. After a 2-D rotary embedding the map
//! serves directly as queries, and its `s × s` average pool as keys. Values
//! are the raw low-resolution features, so the output lives in the source
//! feature space and every output vector is a convex combination of input
//! vectors.
//!
//! The forward signature takes only the image, the low-resolution features
//! and the parameters: guidance extractors are a training-time concern.

pub mod attention;
pub mod conv;
pub mod rope;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::resample::downsample_box;
use crate::numerics::tape::silu;
use crate::numerics::{Backward, FeatureMap, Rng, Tape, Tensor, Var};

pub use attention::{attention_weights, neighborhood_attention, neighborhood_attention_var};
pub use conv::{conv2d, conv2d_var};
pub use rope::{rope2d, rope2d_var, rope_rotate};

#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerConfig {
    /// Guidance / attention dimension `d` (divisible by 4).
    pub guidance_dim: usize,
    /// Odd attention window over low-resolution cells.
    pub attention_window: usize,
    /// Integer upsampling ratio `s`.
    pub ratio: usize,
    pub rope_base: f64,
    /// Odd kernel size per encoder layer.
    pub kernel_sizes: Vec<usize>,
    /// Output widths of all encoder layers but the last (which is `d`).
    pub hidden_widths: Vec<usize>,
    /// Initial value of the last encoder bias.
    pub init_bias: f64,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        UpsamplerConfig {
            guidance_dim: 32,
            attention_window: 3,
            ratio: 4,
            rope_base: 100.0,
            kernel_sizes: vec![5, 3, 3],
            hidden_widths: vec![16, 16],
            init_bias: 0.5,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guidance_dim == 0 || self.guidance_dim % 4 != 0 {
            return Err(Error::config("guidance_dim must be a positive multiple of 4"));
        }
        if self.attention_window % 2 == 0 {
            return Err(Error::config("attention_window must be odd"));
        }
        if self.ratio == 0 {
            return Err(Error::config("ratio must be at least 1"));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::config("encoder kernels must be odd and non-empty"));
        }
        if self.hidden_widths.len() + 1 != self.kernel_sizes.len() || self.hidden_widths.contains(&0) {
            return Err(Error::config("need one positive hidden width per encoder layer but the last"));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("rope_base must be positive"));
        }
        Ok(())
    }

    /// `(kernel, in, out)` per encoder layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut widths = vec![3];
        widths.extend(&self.hidden_widths);
        widths.push(self.guidance_dim);
        self.kernel_sizes.iter().enumerate().map(|(i, &k)| (k, widths[i], widths[i + 1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `k × k × C_in × C_out`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Trainable encoder weights. There is no value projection.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerParams {
    pub layers: Vec<ConvLayer>,
}

impl UpsamplerParams {
    /// He-style initialization from a seeded generator.
    pub fn init(cfg: &UpsamplerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(k, cin, cout))| {
                let std = math::sqrt(2.0 / (k * k * cin) as f64);
                ConvLayer {
                    kernel: Tensor::from_fn(&[k, k, cin, cout], |_| rng.normal() * std),
                    bias: Tensor::full(&[cout], if i == last { cfg.init_bias } else { 0.0 }),
                }
            })
            .collect();
        Ok(UpsamplerParams { layers })
    }

    /// Parameter tensors in declaration order: kernel₀, bias₀, kernel₁, ...
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.kernel, &mut l.bias]).collect()
    }

    pub fn from_tensors(cfg: &UpsamplerConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.layer_shapes();
        if tensors.len() != 2 * shapes.len() {
            return Err(Error::shape(format!("expected {} tensors, got {}", 2 * shapes.len(), tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        for (k, cin, cout) in shapes {
            let kernel = it.next().expect("count checked");
            let bias = it.next().expect("count checked");
            if kernel.shape() != [k, k, cin, cout] || bias.shape() != [cout] {
                return Err(Error::shape("parameter tensor shape does not match config"));
            }
            layers.push(ConvLayer { kernel, bias });
        }
        Ok(UpsamplerParams { layers })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    let (_, _, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("image must have 3 channels, got {c}")));
    }
    Ok(())
}

/// `G = ImageEncoder(I)`: `H × W × 3 → H × W × d`.
pub fn encode_guidance(image: &Tensor, params: &UpsamplerParams) -> Result<Tensor> {
    check_image(image)?;
    let mut x = image.clone();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        x = conv2d(&x, &layer.kernel, &layer.bias)?;
        if i < last {
            x = x.map(|v| v * math::sigmoid(v));
        }
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("guidance activations".into()));
    }
    Ok(x)
}

/// Non-overlapping `s × s` average pool.
pub fn pool_keys(g: &Tensor, s: usize) -> Result<Tensor> {
    downsample_box(g, s)
}

pub fn pool_keys_var(tape: &mut Tape, g: Var, s: usize) -> Result<Var> {
    let out = pool_keys(tape.value(g), s)?;
    Ok(tape.record(out, &[g], PoolRule(s)))
}

struct PoolRule(usize);

impl Backward for PoolRule {
    fn backward(&self, p: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let (h, w, c) = p[0].dims3().expect("checked");
        let s = self.0;
        let inv = 1.0 / (s * s) as f64;
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let src = g.pixel(y / s, x / s);
                for (o, &v) in out[(y * w + x) * c..(y * w + x + 1) * c].iter_mut().zip(src) {
                    *o = v * inv;
                }
            }
        }
        vec![Tensor::new(p[0].shape(), out).expect("shape")]
    }
}

fn check_io(image: &Tensor, f_lr: &Tensor, cfg: &UpsamplerConfig) -> Result<()> {
    cfg.validate()?;
    check_image(image)?;
    let (h, w, _) = image.dims3()?;
    let (lh, lw, _) = f_lr.dims3()?;
    if h != lh * cfg.ratio || w != lw * cfg.ratio {
        return Err(Error::shape(format!(
            "image {h}×{w} is not {}× the feature grid {lh}×{lw}",
            cfg.ratio
        )));
    }
    Ok(())
}

/// `F̂_hr = U_θ(F_lr, I)`, output `(s·h) × (s·w) × C`.
pub fn upsample(image: &Tensor, f_lr: &FeatureMap, params: &UpsamplerParams, cfg: &UpsamplerConfig) -> Result<FeatureMap> {
    check_io(image, f_lr, cfg)?;
    let g = encode_guidance(image, params)?;
    let q = rope2d(&g, cfg.rope_base, cfg.ratio as f64)?;
    let k = pool_keys(&q, cfg.ratio)?;
    neighborhood_attention(&q, &k, f_lr, cfg.attention_window)
}

/// Recorded forward. `params` are the parameter leaves in declaration order.
pub fn upsample_var(tape: &mut Tape, image: &Tensor, f_lr: Var, params: &[Var], cfg: &UpsamplerConfig) -> Result<Var> {
    check_io(image, tape.value(f_lr), cfg)?;
    if params.len() != 2 * cfg.kernel_sizes.len() {
        return Err(Error::shape("parameter leaf count does not match config"));
    }
    let mut x = tape.leaf(image.clone());
    let layers = params.len() / 2;
    for i in 0..layers {
        x = conv2d_var(tape, x, params[2 * i], params[2 * i + 1])?;
        if i + 1 < layers {
            x = silu(tape, x);
        }
    }
    let q = rope2d_var(tape, x, cfg.rope_base, cfg.ratio as f64)?;
    let k = pool_keys_var(tape, q, cfg.ratio)?;
    neighborhood_attention_var(tape, q, k, f_lr, cfg.attention_window)
}

/// Nearest-cell and bilinear references used as non-learned baselines.
pub fn upsample_bilinear(f_lr: &FeatureMap, ratio: usize) -> Result<FeatureMap> {
    let (h, w, _) = f_lr.dims3()?;
    crate::numerics::resample::resize_bilinear(f_lr, h * ratio, w * ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig};

    fn tiny_cfg() -> UpsamplerConfig {
        UpsamplerConfig {
            guidance_dim: 8,
            ratio: 2,
            hidden_widths: vec![4, 4],
            ..Default::default()
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_guidance() {
        let cfg = UpsamplerConfig::default();
        let mut params = UpsamplerParams::init(&cfg, &mut Rng::new(0, 0)).unwrap();
        for l in &mut params.layers {
            l.bias = Tensor::zeros(l.bias.shape());
        }
        let g = encode_guidance(&Tensor::zeros(&[8, 8, 3]), &params).unwrap();
        assert_eq!(g.shape(), &[8, 8, 32]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_deterministic() {
        let cfg = UpsamplerConfig::default();
        let a = UpsamplerParams::init(&cfg, &mut Rng::new(3, 0)).unwrap();
        let b = UpsamplerParams::init(&cfg, &mut Rng::new(3, 0)).unwrap();
        let mut rng = Rng::new(4, 0);
        let img = Tensor::from_fn(&[8, 8, 3], |_| rng.uniform());
        assert_eq!(encode_guidance(&img, &a).unwrap(), encode_guidance(&img, &b).unwrap());
    }

    #[test]
    fn param_count_of_default_encoder() {
        let cfg = UpsamplerConfig::default();
        let p = UpsamplerParams::init(&cfg, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(p.param_count(), (25 * 3 * 16 + 16) + (9 * 16 * 16 + 16) + (9 * 16 * 32 + 32));
        let round = UpsamplerParams::from_tensors(&cfg, p.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(round, p);
    }

    #[test]
    fn ratio_one_window_one_is_identity() {
        let cfg = UpsamplerConfig { ratio: 1, attention_window: 1, ..Default::default() };
        let mut rng = Rng::new(5, 0);
        let params = UpsamplerParams::init(&cfg, &mut rng).unwrap();
        let img = Tensor::from_fn(&[5, 6, 3], |_| rng.uniform());
        let f = Tensor::from_fn(&[5, 6, 7], |_| rng.normal());
        assert_eq!(upsample(&img, &f, &params, &cfg).unwrap(), f);
    }

    #[test]
    fn output_shape_and_errors() {
        let cfg = UpsamplerConfig::default();
        let mut rng = Rng::new(6, 0);
        let params = UpsamplerParams::init(&cfg, &mut rng).unwrap();
        let img = Tensor::from_fn(&[16, 12, 3], |_| rng.uniform());
        let f = Tensor::from_fn(&[4, 3, 5], |_| rng.normal());
        assert_eq!(upsample(&img, &f, &params, &cfg).unwrap().shape(), &[16, 12, 5]);
        let bad = Tensor::from_fn(&[4, 4, 5], |_| 0.0);
        assert!(upsample(&img, &bad, &params, &cfg).is_err());
    }

    #[test]
    fn tape_forward_matches_plain() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(7, 0);
        let params = UpsamplerParams::init(&cfg, &mut rng).unwrap();
        let img = Tensor::from_fn(&[8, 8, 3], |_| rng.uniform());
        let f = Tensor::from_fn(&[4, 4, 3], |_| rng.normal());
        let mut tape = Tape::new();
        let pv: Vec<Var> = params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        let fv = tape.leaf(f.clone());
        let out = upsample_var(&mut tape, &img, fv, &pv, &cfg).unwrap();
        assert_eq!(tape.value(out), &upsample(&img, &f, &params, &cfg).unwrap());
    }

    #[test]
    fn pool_gradient_matches_fd() {
        let mut rng = Rng::new(8, 0);
        let g = Tensor::from_fn(&[4, 6, 2], |_| rng.normal());
        let rep = grad_check(
            |t, v| {
                let p = pool_keys_var(t, v[0], 2)?;
                crate::numerics::tape::sum_of_squares(t, p)
            },
            &[g],
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed);
    }
}
