//! Procedural scenes and synthetic frozen feature extractors.
//!
//! Scenes are painter-style stacks of ellipses, rectangles and convex
//! polygons over a background. Class 0 is the background. Each class has a
//! fixed color and a fixed base depth, so label boundaries, depth jumps and
//! the support of the boundary field coincide pixelwise.
//!
//! A [`SyntheticVfm`] maps the mean color of every `k × k` patch through a
//! seeded random two-layer network and mixes a 3×3 neighborhood of patch
//! cells. Two corruptions model the failure modes of real backbones:
//! single-channel high-norm spikes and spatial misalignment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::resample::downsample_box;
use crate::numerics::{mix64, FeatureMap, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    /// Number of classes including the background.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Per-pixel Gaussian color noise.
    pub noise: f64,
    /// Per-shape uniform color jitter.
    pub jitter: f64,
    /// Radius `r` of the boundary field window, in pixels.
    pub boundary_radius: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            classes: 5,
            min_shapes: 2,
            max_shapes: 5,
            min_radius: 7.0,
            max_radius: 18.0,
            noise: 0.02,
            jitter: 0.04,
            boundary_radius: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("scene size must be positive"));
        }
        if !(2..=255).contains(&self.classes) {
            return Err(Error::config("scene classes must be in 2..=255"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::config("shape radii must satisfy 0 < min <= max"));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::config("noise and jitter must be non-negative"));
        }
        if self.boundary_radius == 0 {
            return Err(Error::config("boundary_radius must be positive"));
        }
        Ok(())
    }

    /// Background depth and per-class base depths span this range before
    /// the scene-wide tilt is added.
    pub fn depth_range(&self) -> (f64, f64) {
        (0.5, 4.5)
    }
}

/// Integer class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{} labels for a {height}×{width} map", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap { height, width, data: vec![class; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Label at the center pixel of every `stride × stride` cell.
    pub fn sample_grid(&self, stride: usize) -> Result<LabelMap> {
        if stride == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::shape(format!("{}×{} labels not divisible by {stride}", self.height, self.width)));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let c = stride / 2;
        let data = (0..h * w).map(|i| self.get((i / w) * stride + c, (i % w) * stride + c)).collect();
        LabelMap::new(h, w, data)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LabelMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape("label crop out of bounds"));
        }
        let data = (0..h * w).map(|i| self.get(y0 + i / w, x0 + i % w)).collect();
        LabelMap::new(h, w, data)
    }
}

/// Values of an `H × W × C` map at the center pixel of every cell.
pub fn sample_grid(f: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w, c) = f.dims3()?;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!("{h}×{w} map not divisible by {stride}")));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mid = stride / 2;
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            out.extend_from_slice(f.pixel(y * stride + mid, x * stride + mid));
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `H × W × 3` in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    /// `H × W × 1`, strictly positive.
    pub depth: Tensor,
    /// `H × W × 2` boundary field in `[-1, 1]`.
    pub boundary: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ShapeKind {
    Ellipse,
    Rect,
    Polygon,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    /// Polygon vertices, counter-clockwise.
    vertices: Vec<(f64, f64)>,
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        match self.kind {
            ShapeKind::Ellipse => (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0,
            ShapeKind::Rect => u.abs() <= self.a && v.abs() <= self.b,
            ShapeKind::Polygon => {
                let n = self.vertices.len();
                (0..n).all(|i| {
                    let (x0, y0) = self.vertices[i];
                    let (x1, y1) = self.vertices[(i + 1) % n];
                    (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0.0
                })
            }
        }
    }
}

/// Fixed class color: gray background, evenly spaced hues otherwise.
pub fn class_color(class: usize, classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    let hue = (class - 1) as f64 / (classes - 1) as f64;
    hsv_to_rgb(hue, 0.7, 0.85)
}

/// `h`, `s`, `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - math::floor(h)) * 6.0;
    let sector = math::floor(h6) as usize % 6;
    let f = h6 - math::floor(h6);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base depth of a class: far background, foreground classes stepped.
pub fn class_depth(class: usize) -> f64 {
    if class == 0 {
        4.0
    } else {
        1.0 + 0.6 * (class - 1) as f64
    }
}

fn random_shape(rng: &mut Rng, cfg: &SceneConfig) -> Shape {
    let n = cfg.size as f64;
    let kind = [ShapeKind::Ellipse, ShapeKind::Rect, ShapeKind::Polygon][rng.below(3)];
    let radius = rng.range(cfg.min_radius, cfg.max_radius);
    let angle = rng.range(0.0, core::f64::consts::PI);
    let (cx, cy) = (rng.range(0.15 * n, 0.85 * n), rng.range(0.15 * n, 0.85 * n));
    let aspect = rng.range(0.55, 1.0);
    let mut vertices = Vec::new();
    if kind == ShapeKind::Polygon {
        let k = 3 + rng.below(4);
        let mut angles: Vec<f64> = (0..k).map(|_| rng.range(0.0, 2.0 * core::f64::consts::PI)).collect();
        angles.sort_by(|a, b| a.total_cmp(b));
        vertices = angles.iter().map(|&t| (cx + radius * math::cos(t), cy + radius * math::sin(t))).collect();
    }
    Shape {
        kind,
        cx,
        cy,
        a: radius,
        b: radius * aspect,
        cos: math::cos(angle),
        sin: math::sin(angle),
        vertices,
    }
}

/// Draws a scene. The generator consumes `rng` in a fixed order.
pub fn gen_scene(rng: &mut Rng, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let n_shapes = cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = 1 + rng.below(cfg.classes - 1);
        let shape = random_shape(rng, cfg);
        let base = class_color(class, cfg.classes);
        let color = base.map(|c| (c + rng.range(-cfg.jitter, cfg.jitter)).clamp(0.0, 1.0));
        shapes.push((class, shape, color));
    }
    let tilt = (rng.range(-0.3, 0.3), rng.range(-0.3, 0.3));
    let size = cfg.size;
    let bg = class_color(0, cfg.classes);
    let mut labels = vec![0u8; size * size];
    let mut image = Tensor::zeros(&[size, size, 3]);
    let mut depth = Tensor::zeros(&[size, size, 1]);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut class = 0;
            let mut color = bg;
            for (c, shape, col) in &shapes {
                if shape.contains(px, py) {
                    class = *c;
                    color = *col;
                }
            }
            labels[y * size + x] = class as u8;
            let rgb = image.pixel_mut(y, x);
            for (o, c) in rgb.iter_mut().zip(color) {
                *o = (c + cfg.noise * rng.normal()).clamp(0.0, 1.0);
            }
            let (u, v) = (px / size as f64 - 0.5, py / size as f64 - 0.5);
            depth.pixel_mut(y, x)[0] = class_depth(class) + tilt.0 * u + tilt.1 * v;
        }
    }
    let labels = LabelMap::new(size, size, labels)?;
    let boundary = boundary_field(&labels, cfg.boundary_radius)?;
    Ok(SceneSample { image, labels, depth, boundary })
}

/// Ground-truth boundary field: where the clamped `(2r+1)²` window holds a
/// foreign label, the mean offset of same-label window pixels divided by `r`
/// and clipped to `[-1, 1]`; zero elsewhere.
pub fn boundary_field(labels: &LabelMap, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::config("boundary radius must be positive"));
    }
    let (h, w) = (labels.height, labels.width);
    let mut out = Tensor::zeros(&[h, w, 2]);
    let ri = r as isize;
    for y in 0..h {
        for x in 0..w {
            let own = labels.get(y, x);
            let (mut sx, mut sy, mut n, mut foreign) = (0.0, 0.0, 0usize, false);
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let qy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let qx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    if labels.get(qy, qx) == own {
                        sx += dx as f64;
                        sy += dy as f64;
                        n += 1;
                    } else {
                        foreign = true;
                    }
                }
            }
            if foreign {
                let b = out.pixel_mut(y, x);
                b[0] = (sx / n as f64 / r as f64).clamp(-1.0, 1.0);
                b[1] = (sy / n as f64 / r as f64).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Corruption {
    None,
    /// Bernoulli(`rate`) cells get one channel overwritten with `magnitude`.
    Artifact { rate: f64, magnitude: f64 },
    /// Translation by `shift = (dx, dy)` and box blur of radius `blur`, both
    /// in cells at the extractor's native stride.
    Misalign { shift: (isize, isize), blur: usize },
}

/// Frozen synthetic feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVfm {
    pub seed: u64,
    /// Native stride `k`.
    pub stride: usize,
    pub channels: usize,
    pub corruption: Corruption,
}

const HIDDEN: usize = 16;
const INPUT_GAIN: f64 = 3.0;
const NEIGHBOR_WEIGHT: f64 = 0.12;

struct VfmWeights {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    mix: [f64; 9],
}

impl SyntheticVfm {
    pub fn clean(seed: u64, stride: usize, channels: usize) -> Self {
        SyntheticVfm { seed, stride, channels, corruption: Corruption::None }
    }

    pub fn with_corruption(mut self, corruption: Corruption) -> Self {
        self.corruption = corruption;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.channels == 0 {
            return Err(Error::config("vfm stride and channels must be positive"));
        }
        match self.corruption {
            Corruption::Artifact { rate, magnitude } if !(0.0..=1.0).contains(&rate) || !magnitude.is_finite() => {
                Err(Error::config("artifact rate must lie in [0, 1] with finite magnitude"))
            }
            _ => Ok(()),
        }
    }

    fn weights(&self) -> VfmWeights {
        let mut rng = Rng::new(self.seed, 0x5f_4d);
        let w1 = (0..3 * HIDDEN).map(|_| rng.normal() * INPUT_GAIN).collect();
        let b1 = (0..HIDDEN).map(|_| rng.normal() * 0.5).collect();
        let scale = 1.0 / math::sqrt(HIDDEN as f64) * 1.5;
        let w2 = (0..HIDDEN * self.channels).map(|_| rng.normal() * scale).collect();
        let mut mix = [0.0; 9];
        for (i, m) in mix.iter_mut().enumerate() {
            *m = if i == 4 { 1.0 } else { NEIGHBOR_WEIGHT * rng.uniform() };
        }
        VfmWeights { w1, b1, w2, mix }
    }

    /// Scales a native-stride cell count to extraction stride `stride`.
    fn scaled(&self, cells: isize, stride: usize) -> isize {
        cells * self.stride as isize / stride as isize
    }
}

fn image_hash(image: &Tensor) -> u64 {
    image.data().iter().fold(0x243f_6a88_85a3_08d3, |h, v| mix64(h ^ v.to_bits()))
}

/// Clean features and, for artifact corruption, the ground-truth mask.
pub fn extract_with_mask(vfm: &SyntheticVfm, image: &Tensor, stride: Option<usize>) -> Result<(FeatureMap, Option<Vec<bool>>)> {
    vfm.validate()?;
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("vfm input must be an RGB image"));
    }
    let k = stride.unwrap_or(vfm.stride);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!("image {h}×{w} not divisible by stride {k}")));
    }
    let cells = downsample_box(image, k)?;
    let (gh, gw) = (h / k, w / k);
    let wt = vfm.weights();
    let ch = vfm.channels;
    let mut hidden = vec![0.0; gh * gw * ch];
    let mut act = [0.0; HIDDEN];
    for (p, px) in cells.data().chunks_exact(3).enumerate() {
        for (j, a) in act.iter_mut().enumerate() {
            let mut s = wt.b1[j];
            for (i, &v) in px.iter().enumerate() {
                s += (v - 0.5) * wt.w1[i * HIDDEN + j];
            }
            *a = math::tanh(s);
        }
        let o = &mut hidden[p * ch..(p + 1) * ch];
        for (j, &a) in act.iter().enumerate() {
            for (oo, &wv) in o.iter_mut().zip(&wt.w2[j * ch..(j + 1) * ch]) {
                *oo += a * wv;
            }
        }
    }
    let mut out = Tensor::zeros(&[gh, gw, ch]);
    for y in 0..gh {
        for x in 0..gw {
            for (m, &wm) in wt.mix.iter().enumerate() {
                let qy = (y as isize + m as isize / 3 - 1).clamp(0, gh as isize - 1) as usize;
                let qx = (x as isize + m as isize % 3 - 1).clamp(0, gw as isize - 1) as usize;
                let src = &hidden[(qy * gw + qx) * ch..(qy * gw + qx + 1) * ch];
                for (o, &v) in out.pixel_mut(y, x).iter_mut().zip(src) {
                    *o += wm * v;
                }
            }
        }
    }
    match vfm.corruption {
        Corruption::None => Ok((out, None)),
        Corruption::Artifact { rate, magnitude } => {
            let mut rng = Rng::new(mix64(vfm.seed ^ image_hash(image)), k as u64);
            let mut mask = vec![false; gh * gw];
            for (p, m) in mask.iter_mut().enumerate() {
                if rng.bernoulli(rate) {
                    *m = true;
                    let j = rng.below(ch);
                    out.data_mut()[p * ch + j] = magnitude;
                }
            }
            Ok((out, Some(mask)))
        }
        Corruption::Misalign { shift, blur } => {
            let s = (vfm.scaled(shift.0, k), vfm.scaled(shift.1, k));
            let b = vfm.scaled(blur as isize, k) as usize;
            Ok((inject_misalign(&out, s, b)?, None))
        }
    }
}

/// Features at `stride` (native stride when `None`), corruption applied.
pub fn extract(vfm: &SyntheticVfm, image: &Tensor, stride: Option<usize>) -> Result<FeatureMap> {
    Ok(extract_with_mask(vfm, image, stride)?.0)
}

/// Translation by `shift = (dx, dy)` cells with edge clamping, then a
/// `(2·blur+1)²` clamped box blur.
pub fn inject_misalign(f: &FeatureMap, shift: (isize, isize), blur: usize) -> Result<FeatureMap> {
    let (h, w, c) = f.dims3()?;
    let (dx, dy) = shift;
    if dx.unsigned_abs() >= w.max(1) || dy.unsigned_abs() >= h.max(1) {
        return Err(Error::input(format!("shift {shift:?} exceeds a {h}×{w} map")));
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut shifted = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let src = f.pixel(clamp(y as isize - dy, h), clamp(x as isize - dx, w));
            shifted.pixel_mut(y, x).copy_from_slice(src);
        }
    }
    if blur == 0 {
        return Ok(shifted);
    }
    let r = blur as isize;
    let inv = 1.0 / ((2 * blur + 1) * (2 * blur + 1)) as f64;
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            for oy in -r..=r {
                for ox in -r..=r {
                    let src = shifted.pixel(clamp(y as isize + oy, h), clamp(x as isize + ox, w));
                    for (o, &v) in out.pixel_mut(y, x).iter_mut().zip(src) {
                        *o += v * inv;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shapes_gives_background_only() {
        let cfg = SceneConfig { min_shapes: 0, max_shapes: 0, ..Default::default() };
        let s = gen_scene(&mut Rng::new(1, 0), &cfg).unwrap();
        assert!(s.labels.data.iter().all(|&l| l == 0));
        assert!(s.boundary.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scene_is_deterministic_and_consistent() {
        let cfg = SceneConfig::default();
        let a = gen_scene(&mut Rng::new(9, 0), &cfg).unwrap();
        let b = gen_scene(&mut Rng::new(9, 0), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.depth.data().iter().all(|&d| d > 0.0));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for y in 0..64 {
            for x in 0..63 {
                let jump = (a.depth.get(&[y, x, 0]) - a.depth.get(&[y, x + 1, 0])).abs() > 0.1;
                assert_eq!(jump, a.labels.get(y, x) != a.labels.get(y, x + 1));
            }
        }
    }

    #[test]
    fn stride_equal_to_image_gives_single_cell() {
        let vfm = SyntheticVfm::clean(0, 2, 6);
        let img = Tensor::full(&[16, 16, 3], 0.3);
        assert_eq!(extract(&vfm, &img, Some(16)).unwrap().shape(), &[1, 1, 6]);
        assert!(extract(&vfm, &img, Some(5)).is_err());
    }

    #[test]
    fn misalign_identity_and_bounds() {
        let mut rng = Rng::new(2, 0);
        let f = Tensor::from_fn(&[4, 5, 2], |_| rng.normal());
        assert_eq!(inject_misalign(&f, (0, 0), 0).unwrap(), f);
        assert!(inject_misalign(&f, (5, 0), 0).is_err());
        let s = inject_misalign(&f, (1, 0), 0).unwrap();
        assert_eq!(s.pixel(2, 3), f.pixel(2, 2));
        assert_eq!(s.pixel(2, 0), f.pixel(2, 0));
    }

    #[test]
    fn misalign_scales_with_extraction_stride() {
        let vfm = SyntheticVfm::clean(4, 2, 4);
        let shifted = vfm.clone().with_corruption(Corruption::Misalign { shift: (1, 0), blur: 0 });
        let mut rng = Rng::new(3, 0);
        let img = Tensor::from_fn(&[16, 16, 3], |_| rng.uniform());
        assert_eq!(extract(&shifted, &img, Some(8)).unwrap(), extract(&vfm, &img, Some(8)).unwrap());
        let fine = extract(&vfm, &img, None).unwrap();
        assert_eq!(extract(&shifted, &img, None).unwrap(), inject_misalign(&fine, (1, 0), 0).unwrap());
    }
}
