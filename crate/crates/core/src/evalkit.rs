//! Linear probes, dense-prediction metrics and raster encoders.
//!
//! Probes see frozen features only: inputs are plain tensors, never tape
//! variables of the upsampler. The segmentation probe is a bias-free
//! `N_cls × C` map trained with softmax cross-entropy. The depth probe maps
//! `concat(F, F)` to 256 bin scores, normalizes `ReLU(S) + 0.1` into a
//! distribution and predicts the expected bin center; it is trained on a
//! scale-invariant log loss plus an L1 loss on log-depth first differences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{Backward, Rng, Tape, Tensor, Var};
use crate::synthworld::{hsv_to_rgb, LabelMap};
use crate::training::AdamW;

pub const DEPTH_BINS: usize = 256;
const SIG_VARIANCE_WEIGHT: f64 = 0.85;
const BIN_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Depth probe patch side and patches per step.
    pub depth_patch: usize,
    pub depth_batch: usize,
    /// Uniform bin centers span `[lo, hi]`.
    pub depth_range: (f64, f64),
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 500,
            learning_rate: 0.05,
            weight_decay: 0.0,
            seed: 0,
            depth_patch: 8,
            depth_batch: 4,
            depth_range: (0.5, 4.5),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("probe learning rate must be positive and weight decay non-negative"));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::config("depth range must satisfy 0 < lo < hi"));
        }
        if self.depth_patch < 2 || self.depth_batch == 0 {
            return Err(Error::config("depth patches need side >= 2 and a positive batch"));
        }
        Ok(())
    }
}

fn flatten(features: &[&Tensor]) -> Result<(Vec<f64>, usize)> {
    let c = features.first().ok_or_else(|| Error::input("no probe features"))?.dims3()?.2;
    let mut out = Vec::new();
    for f in features {
        if f.dims3()?.2 != c {
            return Err(Error::shape("probe features differ in channel count"));
        }
        out.extend_from_slice(f.data());
    }
    Ok((out, c))
}

/// `x · Wᵀ` for constant rows `x` (`n × cin`) and weights `W` (`cout × cin`).
pub fn linear_var(tape: &mut Tape, x: &Tensor, w: Var) -> Result<Var> {
    let out = linear(x, tape.value(w))?;
    Ok(tape.record(out, &[w], LinearRule { x: x.clone() }))
}

fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, cin) = x.dims2()?;
    let (cout, wc) = w.dims2()?;
    if wc != cin {
        return Err(Error::shape(format!("linear weight {:?} for {cin} inputs", w.shape())));
    }
    let mut out = vec![0.0; n * cout];
    for (row, o) in x.data().chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
        for (oo, wr) in o.iter_mut().zip(w.data().chunks_exact(cin)) {
            *oo = row.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(&[n, cout], out)
}

struct LinearRule {
    x: Tensor,
}

impl Backward for LinearRule {
    fn backward(&self, p: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let (cout, cin) = (p[0].shape()[0], p[0].shape()[1]);
        let mut gw = vec![0.0; cout * cin];
        for (row, go) in self.x.data().chunks_exact(cin).zip(g.data().chunks_exact(cout)) {
            for (gwr, &gv) in gw.chunks_exact_mut(cin).zip(go) {
                if gv != 0.0 {
                    for (a, &xv) in gwr.iter_mut().zip(row) {
                        *a += gv * xv;
                    }
                }
            }
        }
        vec![Tensor::new(p[0].shape(), gw).expect("shape")]
    }
}

/// Mean softmax cross-entropy of `n × K` logits against class ids.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let l = tape.value(logits);
    let (n, k) = l.dims2()?;
    if labels.len() != n || n == 0 {
        return Err(Error::shape("one label per logit row is required"));
    }
    if labels.iter().any(|&c| c as usize >= k) {
        return Err(Error::input("label exceeds class count"));
    }
    let mut probs = l.data().to_vec();
    let mut loss = 0.0;
    for (row, &c) in probs.chunks_exact_mut(k).zip(labels) {
        crate::numerics::softmax_slice(row);
        loss -= math::ln(row[c as usize].max(1e-300));
    }
    let value = Tensor::scalar(loss / n as f64);
    Ok(tape.record(value, &[logits], CrossEntropyRule { probs, labels: labels.to_vec(), k }))
}

struct CrossEntropyRule {
    probs: Vec<f64>,
    labels: Vec<u8>,
    k: usize,
}

impl Backward for CrossEntropyRule {
    fn backward(&self, p: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let scale = g.item() / self.labels.len() as f64;
        let mut out = self.probs.clone();
        for (row, &c) in out.chunks_exact_mut(self.k).zip(&self.labels) {
            row[c as usize] -= 1.0;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        vec![Tensor::new(p[0].shape(), out).expect("shape")]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegProbe {
    /// `N_cls × C`.
    pub weight: Tensor,
    /// Classes with no training pixel.
    pub absent_classes: Vec<usize>,
}

impl SegProbe {
    pub fn logits(&self, f: &Tensor) -> Result<Tensor> {
        let (h, w, c) = f.dims3()?;
        let x = Tensor::new(&[h * w, c], f.data().to_vec())?;
        linear(&x, &self.weight)
    }

    pub fn predict(&self, f: &Tensor) -> Result<LabelMap> {
        let (h, w, _) = f.dims3()?;
        let logits = self.logits(f)?;
        let k = self.weight.shape()[0];
        let data = logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(h, w, data)
    }
}

/// Full-batch probe training on frozen feature maps and aligned labels.
pub fn probe_seg(features: &[&Tensor], labels: &[&LabelMap], classes: usize, cfg: &ProbeConfig) -> Result<SegProbe> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::input("one label map per feature map is required"));
    }
    for (f, l) in features.iter().zip(labels) {
        let (h, w, _) = f.dims3()?;
        if (h, w) != (l.height, l.width) {
            return Err(Error::shape("labels and features differ in resolution"));
        }
    }
    let (x, c) = flatten(features)?;
    let y: Vec<u8> = labels.iter().flat_map(|l| l.data.iter().copied()).collect();
    let x = Tensor::new(&[y.len(), c], x)?;
    let mut rng = Rng::new(cfg.seed, 0x5e9);
    let mut weight = Tensor::from_fn(&[classes, c], |_| rng.normal() * 0.01);
    let mut present = vec![false; classes];
    for &l in &y {
        if l as usize >= classes {
            return Err(Error::input(format!("label {l} exceeds {classes} classes")));
        }
        present[l as usize] = true;
    }
    let mut opt = AdamW::new(&[weight.shape()], cfg.learning_rate, cfg.weight_decay);
    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let wv = tape.leaf(weight.clone());
        let logits = linear_var(&mut tape, &x, wv)?;
        let loss = cross_entropy_var(&mut tape, logits, &y)?;
        let g = tape.backward(loss)?.wrt(wv);
        opt.step(&mut [&mut weight], &[g])?;
    }
    let absent_classes = present.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i).collect();
    Ok(SegProbe { weight, absent_classes })
}

/// Expected depth from `n × B` bin scores: `P = (ReLU(S) + 0.1)/Σ`,
/// `D = Σ P·bins`.
pub fn depth_from_scores(scores: &Tensor, bins: &[f64]) -> Result<Tensor> {
    let (n, b) = scores.dims2()?;
    if b != bins.len() {
        return Err(Error::shape("one bin center per score column is required"));
    }
    let mut out = Vec::with_capacity(n);
    for row in scores.data().chunks_exact(b) {
        let (mut num, mut den) = (0.0, 0.0);
        for (&s, &c) in row.iter().zip(bins) {
            let u = s.max(0.0) + BIN_FLOOR;
            num += u * c;
            den += u;
        }
        out.push(num / den);
    }
    Tensor::new(&[n], out)
}

/// Per-row bin probabilities.
pub fn bin_probabilities(scores: &Tensor) -> Result<Tensor> {
    let (_, b) = scores.dims2()?;
    let mut out = scores.map(|s| s.max(0.0) + BIN_FLOOR);
    for row in out.data_mut().chunks_exact_mut(b) {
        let den: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= den;
        }
    }
    Ok(out)
}

pub fn depth_from_scores_var(tape: &mut Tape, scores: Var, bins: &[f64]) -> Result<Var> {
    let d = depth_from_scores(tape.value(scores), bins)?;
    Ok(tape.record(d, &[scores], DepthHeadRule { bins: bins.to_vec() }))
}

struct DepthHeadRule {
    bins: Vec<f64>,
}

impl Backward for DepthHeadRule {
    fn backward(&self, p: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        let b = self.bins.len();
        let mut gs = vec![0.0; p[0].len()];
        for (i, (row, grow)) in p[0].data().chunks_exact(b).zip(gs.chunks_exact_mut(b)).enumerate() {
            let den: f64 = row.iter().map(|s| s.max(0.0) + BIN_FLOOR).sum();
            let d = out.data()[i];
            let gd = g.data()[i];
            for ((gg, &s), &c) in grow.iter_mut().zip(row).zip(&self.bins) {
                if s > 0.0 {
                    *gg = gd * (c - d) / den;
                }
            }
        }
        vec![Tensor::new(p[0].shape(), gs).expect("shape")]
    }
}

fn log_residuals(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("depth operands must be non-empty and equal in length"));
    }
    pred.iter()
        .zip(gt)
        .map(|(&p, &t)| {
            if !(p > 0.0) || !(t > 0.0) {
                Err(Error::LogNonPositive(if p > 0.0 { t } else { p }))
            } else {
                Ok(math::ln(p) - math::ln(t))
            }
        })
        .collect()
}

/// `sqrt(mean g² − 0.85·mean(g)²)` with `g = ln D − ln D_gt`.
pub fn sig_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let g = log_residuals(pred, gt)?;
    let n = g.len() as f64;
    let m = g.iter().sum::<f64>() / n;
    let m2 = g.iter().map(|v| v * v).sum::<f64>() / n;
    Ok(math::sqrt((m2 - SIG_VARIANCE_WEIGHT * m * m).max(0.0)))
}

/// Mean absolute first difference (horizontal and vertical) of
/// `ln D − ln D_gt` over `patches` stacked `side × side` patches.
pub fn grad_loss(pred: &[f64], gt: &[f64], side: usize) -> Result<f64> {
    let g = log_residuals(pred, gt)?;
    let pairs = diff_pairs(g.len(), side)?;
    Ok(pairs.iter().map(|&(a, b)| (g[b] - g[a]).abs()).sum::<f64>() / pairs.len() as f64)
}

fn diff_pairs(n: usize, side: usize) -> Result<Vec<(usize, usize)>> {
    if side < 2 || n % (side * side) != 0 {
        return Err(Error::shape(format!("{n} depths are not whole {side}×{side} patches")));
    }
    let mut out = Vec::new();
    for base in (0..n).step_by(side * side) {
        for y in 0..side {
            for x in 0..side {
                let i = base + y * side + x;
                if x + 1 < side {
                    out.push((i, i + 1));
                }
                if y + 1 < side {
                    out.push((i, i + side));
                }
            }
        }
    }
    Ok(out)
}

/// `SigLoss + GradLoss` of tape depths against ground truth.
pub fn depth_loss_var(tape: &mut Tape, depth: Var, gt: &[f64], side: usize) -> Result<Var> {
    let pred = tape.value(depth).data().to_vec();
    let value = sig_loss(&pred, gt)? + grad_loss(&pred, gt, side)?;
    let g = log_residuals(&pred, gt)?;
    Ok(tape.record(Tensor::scalar(value), &[depth], DepthLossRule { g, pred, side }))
}

struct DepthLossRule {
    g: Vec<f64>,
    pred: Vec<f64>,
    side: usize,
}

impl Backward for DepthLossRule {
    fn backward(&self, p: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = self.g.len() as f64;
        let m = self.g.iter().sum::<f64>() / n;
        let m2 = self.g.iter().map(|v| v * v).sum::<f64>() / n;
        let sig = math::sqrt((m2 - SIG_VARIANCE_WEIGHT * m * m).max(0.0));
        let mut dg = vec![0.0; self.g.len()];
        if sig > 0.0 {
            for (d, &gi) in dg.iter_mut().zip(&self.g) {
                *d = (gi - SIG_VARIANCE_WEIGHT * m) / (n * sig);
            }
        }
        let pairs = diff_pairs(self.g.len(), self.side).expect("checked in forward");
        let inv = 1.0 / pairs.len() as f64;
        for (a, b) in pairs {
            let s = sign(self.g[b] - self.g[a]) * inv;
            dg[b] += s;
            dg[a] -= s;
        }
        let gs = grad.item();
        let out = dg.iter().zip(&self.pred).map(|(d, &p)| gs * d / p).collect();
        vec![Tensor::new(p[0].shape(), out).expect("shape")]
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn depth_bins(range: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = range;
    (0..DEPTH_BINS).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / DEPTH_BINS as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthProbe {
    /// `256 × 2C`.
    pub weight: Tensor,
    pub bins: Vec<f64>,
}

fn concat_self(f: &[f64], c: usize) -> Vec<f64> {
    f.chunks_exact(c).flat_map(|px| px.iter().chain(px).copied()).collect()
}

impl DepthProbe {
    pub fn scores(&self, f: &Tensor) -> Result<Tensor> {
        let (h, w, c) = f.dims3()?;
        let x = Tensor::new(&[h * w, 2 * c], concat_self(f.data(), c))?;
        linear(&x, &self.weight)
    }

    /// `H × W × 1` expected depth.
    pub fn predict(&self, f: &Tensor) -> Result<Tensor> {
        let (h, w, _) = f.dims3()?;
        depth_from_scores(&self.scores(f)?, &self.bins)?.reshape(&[h, w, 1])
    }
}

/// Trains on random square patches of the frozen maps.
pub fn probe_depth(features: &[&Tensor], depths: &[&Tensor], cfg: &ProbeConfig) -> Result<DepthProbe> {
    cfg.validate()?;
    if features.len() != depths.len() || features.is_empty() {
        return Err(Error::input("one depth map per feature map is required"));
    }
    let side = cfg.depth_patch;
    let c = features[0].dims3()?.2;
    for (f, d) in features.iter().zip(depths) {
        let (h, w, fc) = f.dims3()?;
        if fc != c || d.shape() != [h, w, 1] {
            return Err(Error::shape("depth maps must be H × W × 1 and match their features"));
        }
        if h < side || w < side {
            return Err(Error::shape("feature map smaller than a depth patch"));
        }
        if let Some(&bad) = d.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::LogNonPositive(bad));
        }
    }
    let bins = depth_bins(cfg.depth_range);
    let mut rng = Rng::new(cfg.seed, 0xde9);
    let mut weight = Tensor::from_fn(&[DEPTH_BINS, 2 * c], |_| rng.normal() * 0.1);
    let mut opt = AdamW::new(&[weight.shape()], cfg.learning_rate, cfg.weight_decay);
    let mut x = Vec::with_capacity(cfg.depth_batch * side * side * 2 * c);
    let mut gt = Vec::with_capacity(cfg.depth_batch * side * side);
    for _ in 0..cfg.iterations {
        x.clear();
        gt.clear();
        for _ in 0..cfg.depth_batch {
            let i = rng.below(features.len());
            let (h, w, _) = features[i].dims3()?;
            let (y0, x0) = (rng.below(h - side + 1), rng.below(w - side + 1));
            for y in y0..y0 + side {
                for xx in x0..x0 + side {
                    let px = features[i].pixel(y, xx);
                    x.extend_from_slice(px);
                    x.extend_from_slice(px);
                    gt.push(depths[i].pixel(y, xx)[0]);
                }
            }
        }
        let xt = Tensor::new(&[gt.len(), 2 * c], x.clone())?;
        let mut tape = Tape::new();
        let wv = tape.leaf(weight.clone());
        let s = linear_var(&mut tape, &xt, wv)?;
        let d = depth_from_scores_var(&mut tape, s, &bins)?;
        let loss = depth_loss_var(&mut tape, d, &gt, side)?;
        let g = tape.backward(loss)?.wrt(wv);
        opt.step(&mut [&mut weight], &[g])?;
    }
    Ok(DepthProbe { weight, bins })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
}

/// Confusion-matrix IoU. Classes absent from both maps are excluded.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<SegMetrics> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("prediction and ground truth differ in size"));
    }
    if pred.data.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut conf = vec![0usize; classes * classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p as usize >= classes || g as usize >= classes {
            return Err(Error::input("label exceeds class count"));
        }
        conf[g as usize * classes + p as usize] += 1;
    }
    let mut per_class_iou = Vec::with_capacity(classes);
    let mut correct = 0;
    for c in 0..classes {
        let tp = conf[c * classes + c];
        correct += tp;
        let gt_c: usize = conf[c * classes..(c + 1) * classes].iter().sum();
        let pred_c: usize = (0..classes).map(|g| conf[g * classes + c]).sum();
        let union = gt_c + pred_c - tp;
        per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(SegMetrics { per_class_iou, miou, accuracy: correct as f64 / pred.data.len() as f64 })
}

/// Fraction of pixels with `max(D/D_gt, D_gt/D) < 1.25`.
pub fn delta1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("depth operands must be non-empty and equal in length"));
    }
    let mut hits = 0;
    for (&p, &t) in pred.iter().zip(gt) {
        if !(p > 0.0) || !(t > 0.0) {
            return Err(Error::LogNonPositive(if p > 0.0 { t } else { p }));
        }
        if (p / t).max(t / p) < 1.25 {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

/// Raster encoders: byte buffers for grayscale and RGB images.
pub mod viz {
    use super::*;

    /// Entropy as gray levels, `ln w²` maps to 255.
    pub fn entropy_gray(entropy: &Tensor, window: usize) -> Result<Vec<u8>> {
        let max = math::ln((window * window) as f64);
        let _ = entropy.dims2()?;
        Ok(entropy
            .data()
            .iter()
            .map(|&h| if max > 0.0 { to_byte(h / max) } else { 255 })
            .collect())
    }

    /// COM field as RGB: hue from the angle, value from the magnitude
    /// (`|b| = √2` is full value), full saturation.
    pub fn com_rgb(com: &Tensor) -> Result<Vec<u8>> {
        let (_, _, c) = com.dims3()?;
        if c != 2 {
            return Err(Error::shape("COM field must have two channels"));
        }
        let mut out = Vec::with_capacity(com.len() / 2 * 3);
        for b in com.data().chunks_exact(2) {
            let mag = math::sqrt(b[0] * b[0] + b[1] * b[1]) / core::f64::consts::SQRT_2;
            let turn = math::atan2(b[1], b[0]) / (2.0 * core::f64::consts::PI);
            let hue = turn - math::floor(turn);
            out.extend(hsv_to_rgb(hue, 1.0, mag.min(1.0)).map(to_byte));
        }
        Ok(out)
    }

    /// Indexed gray levels, spread evenly over `0..=255`.
    pub fn selection_gray(index: &[usize], sources: usize) -> Vec<u8> {
        let step = if sources > 1 { 255 / (sources - 1) } else { 0 };
        index.iter().map(|&i| (i * step).min(255) as u8).collect()
    }

    /// Class map as gray levels.
    pub fn labels_gray(labels: &LabelMap, classes: usize) -> Vec<u8> {
        let idx: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
        selection_gray(&idx, classes)
    }

    pub fn image_rgb(image: &Tensor) -> Result<Vec<u8>> {
        let (_, _, c) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape("image must have three channels"));
        }
        Ok(image.data().iter().map(|&v| to_byte(v)).collect())
    }

    fn to_byte(v: f64) -> u8 {
        math::round(v.clamp(0.0, 1.0) * 255.0) as u8
    }
}
