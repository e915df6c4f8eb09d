//! Spikiness-aware source selection and consensus COM field.
//!
//! Each guidance source yields a relational field. Its entropy is Z-scored
//! over the image, combined with a hinge penalty on spikiness into a
//! per-pixel confidence, and the most confident source wins each pixel. The
//! consensus field copies the winner's COM vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::resample::resize_bilinear;
use crate::numerics::{FeatureMap, Tensor};
use crate::relational::{project, relational_field, Projection, RelationalConfig, RelationalField};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Penalty strength `β`.
    pub beta: f64,
    /// Spikiness tolerance `γ`.
    pub gamma: f64,
    /// Lower bound on the Z-score denominator.
    pub std_floor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { beta: 20.0, gamma: 0.6, std_floor: 1e-8 }
    }
}

/// How per-source COM fields are merged into one target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionStrategy {
    /// Winner-take-all on the spikiness-aware confidence.
    Select,
    /// Unweighted mean of the fields (baseline).
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusField {
    /// `H × W × 2`.
    pub com: Tensor,
    /// `H × W × N`, one-hot over sources.
    pub selection: Tensor,
    /// `H × W × N`.
    pub confidence: Tensor,
}

impl ConsensusField {
    /// Index of the selected source at each pixel.
    pub fn selected_index(&self) -> Vec<usize> {
        let n = self.selection.shape()[2];
        self.selection
            .data()
            .chunks_exact(n)
            .map(|a| a.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }
}

/// `(H − mean) / max(std, floor)` with population statistics; constant maps
/// map to zeros.
pub fn zscore(h: &Tensor, std_floor: f64) -> Result<Tensor> {
    if h.is_empty() {
        return Err(Error::input("zscore of an empty map"));
    }
    let n = h.len() as f64;
    let mean = h.sum() / n;
    let var = h.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = math::sqrt(var).max(std_floor);
    Ok(h.map(|v| (v - mean) / std))
}

/// `g = −H̃ − β·max(0, K − γ)`.
pub fn confidence(h_tilde: &Tensor, spikiness: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    h_tilde.zip_map(spikiness, |h, k| -h - cfg.beta * (k - cfg.gamma).max(0.0))
}

/// One-hot argmax over the last axis; ties go to the lowest source index.
pub fn select(g: &Tensor) -> Result<Tensor> {
    let n = match g.shape() {
        [_, _, n] if *n >= 1 => *n,
        s => return Err(Error::shape(format!("expected H×W×N confidence with N ≥ 1, got {s:?}"))),
    };
    let mut out = vec![0.0; g.len()];
    for (gp, ap) in g.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mut best = 0;
        for i in 1..n {
            if gp[i] > gp[best] {
                best = i;
            }
        }
        ap[best] = 1.0;
    }
    Tensor::new(g.shape(), out)
}

/// `b_ens(p) = Σᵢ αᵢ(p) bᵢ(p)` for `b: H × W × N × 2` and one-hot `α: H × W × N`.
pub fn consensus(b: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (h, w, n) = alpha.dims3()?;
    if b.shape() != [h, w, n, 2] {
        return Err(Error::shape(format!("fields {:?} vs selection {:?}", b.shape(), alpha.shape())));
    }
    let mut out = vec![0.0; h * w * 2];
    for p in 0..h * w {
        let a = &alpha.data()[p * n..(p + 1) * n];
        if a.iter().filter(|&&v| v == 1.0).count() != 1 || a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::input("selection is not one-hot"));
        }
        let i = a.iter().position(|&v| v == 1.0).expect("checked");
        let src = &b.data()[(p * n + i) * 2..(p * n + i) * 2 + 2];
        out[p * 2..p * 2 + 2].copy_from_slice(src);
    }
    Tensor::new(&[h, w, 2], out)
}

/// Stacks per-source `H × W × 2` fields into `H × W × N × 2`.
pub fn stack_fields(fields: &[&Tensor]) -> Result<Tensor> {
    let first = fields.first().ok_or_else(|| Error::input("no source fields"))?;
    let (h, w, two) = first.dims3()?;
    if two != 2 || fields.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::shape("source COM fields must share an H×W×2 shape"));
    }
    let n = fields.len();
    let mut out = vec![0.0; h * w * n * 2];
    for p in 0..h * w {
        for (i, f) in fields.iter().enumerate() {
            out[(p * n + i) * 2..(p * n + i) * 2 + 2].copy_from_slice(&f.data()[p * 2..p * 2 + 2]);
        }
    }
    Tensor::new(&[h, w, n, 2], out)
}

/// Unweighted per-pixel mean of the source fields, re-clipped to `[-1, 1]`.
pub fn fuse_baseline_mean(fields: &[&Tensor]) -> Result<Tensor> {
    let first = fields.first().ok_or_else(|| Error::input("no source fields"))?;
    let mut acc = Tensor::zeros(first.shape());
    for f in fields {
        if f.shape() != first.shape() {
            return Err(Error::shape("source COM fields differ in shape"));
        }
        acc.add_assign(f);
    }
    let inv = 1.0 / fields.len() as f64;
    Ok(acc.map(|v| (v * inv).clamp(-1.0, 1.0)))
}

/// Relational fields of each source, projected and bilinearly resampled to
/// the target resolution first.
pub fn source_fields(
    features: &[&FeatureMap],
    projections: &[&Projection],
    rel: &RelationalConfig,
    target: (usize, usize),
) -> Result<Vec<RelationalField>> {
    if features.is_empty() {
        return Err(Error::input("at least one guidance source is required"));
    }
    if features.len() != projections.len() {
        return Err(Error::input("one projection per source is required"));
    }
    features
        .iter()
        .zip(projections)
        .map(|(f, phi)| {
            let z = project(f, phi)?;
            let z = resize_bilinear(&z, target.0, target.1)?;
            relational_field(&z, None, rel)
        })
        .collect()
}

/// Selection-based consensus from precomputed relational fields.
pub fn consensus_from_fields(fields: &[RelationalField], cfg: &FusionConfig) -> Result<ConsensusField> {
    let first = fields.first().ok_or_else(|| Error::input("no source fields"))?;
    let (h, w) = first.entropy.dims2()?;
    let n = fields.len();
    let mut g = vec![0.0; h * w * n];
    for (i, f) in fields.iter().enumerate() {
        let gi = confidence(&zscore(&f.entropy, cfg.std_floor)?, &f.spikiness, cfg)?;
        for p in 0..h * w {
            g[p * n + i] = gi.data()[p];
        }
    }
    let g = Tensor::new(&[h, w, n], g)?;
    let alpha = select(&g)?;
    let coms: Vec<&Tensor> = fields.iter().map(|f| &f.com).collect();
    let com = consensus(&stack_fields(&coms)?, &alpha)?;
    Ok(ConsensusField { com, selection: alpha, confidence: g })
}

/// Full consensus pipeline over a panel of sources with possibly different
/// native resolutions.
pub fn build_consensus(
    features: &[&FeatureMap],
    projections: &[&Projection],
    rel: &RelationalConfig,
    cfg: &FusionConfig,
    target: (usize, usize),
) -> Result<ConsensusField> {
    let fields = source_fields(features, projections, rel, target)?;
    consensus_from_fields(&fields, cfg)
}

/// Guidance target under either fusion strategy.
pub fn fused_target(
    features: &[&FeatureMap],
    projections: &[&Projection],
    rel: &RelationalConfig,
    cfg: &FusionConfig,
    strategy: FusionStrategy,
    target: (usize, usize),
) -> Result<Tensor> {
    let fields = source_fields(features, projections, rel, target)?;
    match strategy {
        FusionStrategy::Select => Ok(consensus_from_fields(&fields, cfg)?.com),
        FusionStrategy::Mean => fuse_baseline_mean(&fields.iter().map(|f| &f.com).collect::<Vec<_>>()),
    }
}
