//! Decoupled training objective and the optimizer loop.
//!
//! `L_total = L_rec + λ·L_guide`. The reconstruction term is the MSE between
//! the upsampled features and genuine finer-stride features of the same
//! source extractor. The guidance term is the mean per-position L1 distance
//! between the COM field of the prediction (identity projection) and the
//! consensus field of a guidance panel, which is precomputed per pair and
//! never differentiated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::{fused_target, FusionConfig, FusionStrategy};
use crate::math;
use crate::numerics::resample::{crop, downsample_box};
use crate::numerics::tape::mse;
use crate::numerics::{mix64, FeatureMap, Rng, Tape, Tensor, Var};
use crate::relational::{com_field_var, Projection, RelationalConfig};
use crate::synthworld::{extract, SceneSample, SyntheticVfm};
use crate::upsampler::{upsample, upsample_var, UpsamplerConfig, UpsamplerParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Square crop side in pixels; a multiple of `fine_stride · ratio`.
    pub crop: usize,
    /// Target stride `k`; sources are read at `k` and `k · s`.
    pub fine_stride: usize,
    /// Source extractors, visited round-robin.
    pub sources: Vec<SyntheticVfm>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            batch: 2,
            iterations: 2000,
            seed: 0,
            crop: 32,
            fine_stride: 2,
            sources: vec![SyntheticVfm::clean(100, 2, 8)],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, ratio: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate must be positive and weight decay non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.sources.is_empty() {
            return Err(Error::config("at least one source extractor is required"));
        }
        let coarse = self.fine_stride * ratio;
        if self.fine_stride == 0 || self.crop < coarse || self.crop % coarse != 0 {
            return Err(Error::config(format!(
                "crop {} must be a positive multiple of the coarse stride {coarse}",
                self.crop
            )));
        }
        Ok(())
    }
}

/// Guidance extractors with their frozen projections and fusion settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePanel {
    pub vfms: Vec<SyntheticVfm>,
    pub projections: Vec<Projection>,
    pub relational: RelationalConfig,
    pub fusion: FusionConfig,
    pub strategy: FusionStrategy,
}

impl GuidancePanel {
    /// Projections are seeded per source from `relational.projection_seed`.
    pub fn new(vfms: Vec<SyntheticVfm>, relational: RelationalConfig, fusion: FusionConfig, strategy: FusionStrategy) -> Result<Self> {
        relational.validate()?;
        let projections = vfms
            .iter()
            .enumerate()
            .map(|(i, v)| Projection::seeded(v.channels, relational.dim, mix64(relational.projection_seed ^ i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GuidancePanel { vfms, projections, relational, fusion, strategy })
    }

    /// Fused guidance field of `image` at the grid of `stride`.
    pub fn target(&self, image: &Tensor, stride: usize) -> Result<Tensor> {
        if self.vfms.is_empty() {
            return Err(Error::config("guidance panel is empty"));
        }
        let (h, w, _) = image.dims3()?;
        let feats = self.vfms.iter().map(|v| extract(v, image, Some(stride))).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FeatureMap> = feats.iter().collect();
        let projs: Vec<&Projection> = self.projections.iter().collect();
        fused_target(&refs, &projs, &self.relational, &self.fusion, self.strategy, (h / stride, w / stride))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    /// Guidance image at the target grid, `(s·h) × (s·w) × 3`.
    pub image: Tensor,
    pub f_lr: FeatureMap,
    pub f_hr: FeatureMap,
    /// Consensus field at the target grid; absent when guidance is off.
    pub b_ens: Option<Tensor>,
    pub source: usize,
}

/// Random coarse-aligned crop of `sample`, source features at the coarse
/// and fine strides, and the guidance target when `guidance` is given.
pub fn make_pair(
    sample: &SceneSample,
    source: &SyntheticVfm,
    source_id: usize,
    guidance: Option<&GuidancePanel>,
    cfg: &TrainConfig,
    ratio: usize,
    rng: &mut Rng,
) -> Result<TrainPair> {
    cfg.validate(ratio)?;
    let (h, w, _) = sample.image.dims3()?;
    let coarse = cfg.fine_stride * ratio;
    if h < cfg.crop || w < cfg.crop {
        return Err(Error::input(format!("scene {h}×{w} smaller than crop {}", cfg.crop)));
    }
    let y0 = rng.below((h - cfg.crop) / coarse + 1) * coarse;
    let x0 = rng.below((w - cfg.crop) / coarse + 1) * coarse;
    let img = crop(&sample.image, y0, x0, cfg.crop, cfg.crop)?;
    let f_lr = extract(source, &img, Some(coarse))?;
    let f_hr = extract(source, &img, Some(cfg.fine_stride))?;
    let b_ens = match guidance {
        Some(panel) => Some(panel.target(&img, cfg.fine_stride)?),
        None => None,
    };
    Ok(TrainPair { image: downsample_box(&img, cfg.fine_stride)?, f_lr, f_hr, b_ens, source: source_id })
}

/// Mean squared difference over all positions and channels.
pub fn loss_rec(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("reconstruction operands differ in shape"));
    }
    if pred.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Mean over positions of the L1 norm of the per-position field difference.
pub fn loss_guide(b_hat: &Tensor, b_ens: &Tensor) -> Result<f64> {
    if b_hat.shape() != b_ens.shape() {
        return Err(Error::shape("guidance operands differ in shape"));
    }
    let (h, w, _) = b_hat.dims3()?;
    if h * w == 0 {
        return Err(Error::EmptyReduction);
    }
    let s: f64 = b_hat.data().iter().zip(b_ens.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / (h * w) as f64)
}

pub fn loss_rec_var(tape: &mut Tape, pred: Var, target: &FeatureMap) -> Result<Var> {
    let t = tape.leaf(target.clone());
    mse(tape, pred, t)
}

/// `b̂` is computed on the tape from `pred` with the identity projection.
pub fn loss_guide_var(tape: &mut Tape, pred: Var, b_ens: &Tensor, rel: &RelationalConfig) -> Result<Var> {
    let b_hat = com_field_var(tape, pred, rel)?;
    let (h, w, _) = tape.value(b_hat).dims3()?;
    let t = tape.leaf(b_ens.clone());
    let d = tape.sub(b_hat, t)?;
    let a = tape.abs(d)?;
    let s = tape.sum_all(a)?;
    Ok(tape.scale(s, 1.0 / (h * w) as f64))
}

pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    /// Never evaluated when `λ = 0`.
    pub guide: Option<Var>,
}

/// Records `L_total` of one pair. `params` are parameter leaves.
pub fn loss_total_var(
    tape: &mut Tape,
    pair: &TrainPair,
    params: &[Var],
    ucfg: &UpsamplerConfig,
    lambda: f64,
    rel: &RelationalConfig,
) -> Result<LossVars> {
    let f_lr = tape.leaf(pair.f_lr.clone());
    let pred = upsample_var(tape, &pair.image, f_lr, params, ucfg)?;
    let rec = loss_rec_var(tape, pred, &pair.f_hr)?;
    if lambda == 0.0 {
        return Ok(LossVars { total: rec, rec, guide: None });
    }
    let b_ens = pair.b_ens.as_ref().ok_or_else(|| Error::input("pair has no guidance target but lambda > 0"))?;
    let guide = loss_guide_var(tape, pred, b_ens, rel)?;
    let total = tape.axpy(rec, lambda, guide)?;
    Ok(LossVars { total, rec, guide: Some(guide) })
}

/// Plain evaluation of `L_total` for one pair.
pub fn loss_total(
    pair: &TrainPair,
    params: &UpsamplerParams,
    ucfg: &UpsamplerConfig,
    lambda: f64,
    rel: &RelationalConfig,
) -> Result<f64> {
    let pred = upsample(&pair.image, &pair.f_lr, params, ucfg)?;
    let rec = loss_rec(&pred, &pair.f_hr)?;
    if lambda == 0.0 {
        return Ok(rec);
    }
    let b_ens = pair.b_ens.as_ref().ok_or_else(|| Error::input("pair has no guidance target but lambda > 0"))?;
    let b_hat = crate::relational::relational_field(&pred, None, rel)?.com;
    Ok(rec + lambda * loss_guide(&b_hat, b_ens)?)
}

/// AdamW with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]], learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimizer state does not match parameters"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("gradient shape differs from parameter"));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - math::pow(self.beta1, t as f64);
        let c2 = 1.0 - math::pow(self.beta2, t as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, (pv, &gv)) in pd.iter_mut().zip(gd).enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gv;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gv * gv;
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                *pv -= self.learning_rate * (m_hat / (math::sqrt(v_hat) + self.eps) + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub source: usize,
    pub loss_rec: f64,
    /// `None` when guidance is off.
    pub loss_guide: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: UpsamplerParams,
    pub trace: Vec<TraceRow>,
}

/// Gradient of the batch-mean loss and the mean loss components.
fn batch_step(
    pairs: &[TrainPair],
    params: &UpsamplerParams,
    ucfg: &UpsamplerConfig,
    lambda: f64,
    rel: &RelationalConfig,
) -> Result<(Vec<Tensor>, f64, Option<f64>, f64)> {
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut rec, mut guide, mut total) = (0.0, 0.0, 0.0);
    let inv = 1.0 / pairs.len() as f64;
    for pair in pairs {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        let l = loss_total_var(&mut tape, pair, &leaves, ucfg, lambda, rel)?;
        let lt = tape.value(l.total).item();
        rec += tape.value(l.rec).item() * inv;
        if let Some(g) = l.guide {
            guide += tape.value(g).item() * inv;
        }
        total += lt * inv;
        if !lt.is_finite() {
            return Ok((grads, rec, lambda_guide(lambda, guide), f64::NAN));
        }
        let g = tape.backward(l.total)?;
        for (acc, leaf) in grads.iter_mut().zip(&leaves) {
            if let Some(gl) = g.get(*leaf) {
                for (a, &v) in acc.data_mut().iter_mut().zip(gl.data()) {
                    *a += v * inv;
                }
            }
        }
    }
    Ok((grads, rec, lambda_guide(lambda, guide), total))
}

fn lambda_guide(lambda: f64, guide: f64) -> Option<f64> {
    (lambda != 0.0).then_some(guide)
}

/// Seeded training loop. Each iteration draws `batch` pairs from one source
/// (round-robin over sources) and random scenes, then takes one step.
pub fn train(
    scenes: &[SceneSample],
    cfg: &TrainConfig,
    ucfg: &UpsamplerConfig,
    guidance: Option<&GuidancePanel>,
) -> Result<TrainOutcome> {
    ucfg.validate()?;
    cfg.validate(ucfg.ratio)?;
    if scenes.is_empty() {
        return Err(Error::input("no training scenes"));
    }
    let panel = if cfg.lambda > 0.0 {
        Some(guidance.ok_or_else(|| Error::config("lambda > 0 requires a guidance panel"))?)
    } else {
        None
    };
    let root = Rng::new(cfg.seed, 0);
    let mut params = UpsamplerParams::init(ucfg, &mut root.split(1))?;
    let mut data_rng = root.split(2);
    let shapes: Vec<&[usize]> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut opt = AdamW::new(&shapes, cfg.learning_rate, cfg.weight_decay);
    let rel = panel.map(|p| p.relational.clone()).unwrap_or_default();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let source = iteration % cfg.sources.len();
        let pairs = (0..cfg.batch)
            .map(|_| {
                let scene = &scenes[data_rng.below(scenes.len())];
                make_pair(scene, &cfg.sources[source], source, panel, cfg, ucfg.ratio, &mut data_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (grads, loss_rec, loss_guide, loss_total) = batch_step(&pairs, &params, ucfg, cfg.lambda, &rel)?;
        trace.push(TraceRow { iteration, source, loss_rec, loss_guide, loss_total });
        if !loss_total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration, trace });
        }
        opt.step(&mut params.tensors_mut(), &grads)?;
        if !params.is_finite() {
            return Err(Error::Divergence { iteration, trace });
        }
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_closed_form() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(&[&[]], 0.1, 0.0);
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut opt = AdamW::new(&[&[2]], 0.1, 0.0);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(&[&[]], 0.1, 0.0);
        assert!(opt.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]).is_err());
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::zeros(&[2, 2, 3]);
        assert_eq!(loss_rec(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_rec(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        let z = Tensor::zeros(&[3, 3, 2]);
        let t = Tensor::from_fn(&[3, 3, 2], |i| if i % 2 == 0 { 0.5 } else { -0.5 });
        assert!((loss_guide(&z, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(loss_rec(&a, &z).is_err());
    }
}
