//! End-to-end experiment pipeline and ablation suites.
//!
//! One run: generate training and evaluation scenes, train an upsampler,
//! upsample the first source's coarse features on every evaluation scene,
//! fit linear probes on the first half of the evaluation scenes and score
//! them on the second half. Ground truth is sampled at the center pixel of
//! every fine cell.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::evalkit::{delta1, miou, probe_depth, probe_seg, ProbeConfig};
use crate::fusion::{FusionConfig, FusionStrategy};
use crate::math;
use crate::numerics::resample::downsample_box;
use crate::numerics::{Rng, Tensor};
use crate::relational::RelationalConfig;
use crate::synthworld::{extract, gen_scene, sample_grid, Corruption, SceneConfig, SceneSample, SyntheticVfm};
use crate::training::{train, GuidancePanel, TrainConfig, TraceRow};
use crate::upsampler::{upsample, upsample_bilinear, UpsamplerConfig, UpsamplerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Learned,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    /// Split evenly between probe fitting and scoring.
    pub eval_scenes: usize,
    pub guidance: Vec<SyntheticVfm>,
    pub relational: RelationalConfig,
    pub fusion: FusionConfig,
    pub strategy: FusionStrategy,
    pub upsampler: UpsamplerConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub method: Method,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            scene: SceneConfig::default(),
            train_scenes: 24,
            eval_scenes: 12,
            guidance: vec![SyntheticVfm::clean(201, 2, 12), SyntheticVfm::clean(202, 2, 12)],
            relational: RelationalConfig::default(),
            fusion: FusionConfig::default(),
            strategy: FusionStrategy::Select,
            upsampler: UpsamplerConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            method: Method::Learned,
        }
    }
}

impl LabConfig {
    /// Misaligned source with two guidance extractors carrying independent
    /// high-norm artifacts.
    pub fn corrupted_panel() -> Self {
        let mut cfg = LabConfig::default();
        cfg.train.sources =
            vec![SyntheticVfm::clean(100, 2, 8).with_corruption(Corruption::Misalign { shift: (1, 1), blur: 0 })];
        let artifact = Corruption::Artifact { rate: 0.05, magnitude: 10.0 };
        cfg.guidance = vec![
            SyntheticVfm::clean(201, 2, 12).with_corruption(artifact.clone()),
            SyntheticVfm::clean(202, 2, 12).with_corruption(artifact),
        ];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.relational.validate()?;
        self.upsampler.validate()?;
        self.train.validate(self.upsampler.ratio)?;
        self.probe.validate()?;
        if self.train_scenes == 0 || self.eval_scenes < 2 {
            return Err(Error::config("need at least one training and two evaluation scenes"));
        }
        if self.train.lambda > 0.0 && self.guidance.is_empty() && self.method == Method::Learned {
            return Err(Error::config("lambda > 0 requires guidance extractors"));
        }
        let coarse = self.train.fine_stride * self.upsampler.ratio;
        if self.scene.size % coarse != 0 {
            return Err(Error::config(format!("scene size must be a multiple of the coarse stride {coarse}")));
        }
        Ok(())
    }

    pub fn panel(&self) -> Result<GuidancePanel> {
        GuidancePanel::new(self.guidance.clone(), self.relational.clone(), self.fusion.clone(), self.strategy)
    }
}

/// Scenes for one run: training scenes from stream 1, evaluation from 2.
pub fn scenes(cfg: &SceneConfig, seed: u64, count: usize, eval: bool) -> Result<Vec<SceneSample>> {
    let root = Rng::new(seed, 0).split(if eval { 2 } else { 1 });
    (0..count).map(|i| gen_scene(&mut root.split(i as u64), cfg)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub seed: u64,
    pub miou: f64,
    pub accuracy: f64,
    pub delta1: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub absent_classes: Vec<usize>,
    pub trace: Vec<TraceRow>,
}

pub struct RunArtifacts {
    pub report: RunReport,
    pub params: Option<UpsamplerParams>,
}

/// Upsampled features of every scene with `method`.
pub fn upsample_scenes(
    scenes: &[SceneSample],
    source: &SyntheticVfm,
    params: Option<&UpsamplerParams>,
    cfg: &LabConfig,
) -> Result<Vec<Tensor>> {
    let k = cfg.train.fine_stride;
    let s = cfg.upsampler.ratio;
    scenes
        .iter()
        .map(|sc| {
            let f_lr = extract(source, &sc.image, Some(k * s))?;
            match (cfg.method, params) {
                (Method::Bilinear, _) => upsample_bilinear(&f_lr, s),
                (Method::Learned, Some(p)) => upsample(&downsample_box(&sc.image, k)?, &f_lr, p, &cfg.upsampler),
                (Method::Learned, None) => Err(Error::input("learned method requires parameters")),
            }
        })
        .collect()
}

/// Fits probes on the first half of the features and scores the second.
pub fn evaluate(features: &[Tensor], scenes: &[SceneSample], cfg: &LabConfig, seed: u64) -> Result<RunReport> {
    let k = cfg.train.fine_stride;
    let labels = scenes.iter().map(|s| s.labels.sample_grid(k)).collect::<Result<Vec<_>>>()?;
    let depths = scenes.iter().map(|s| sample_grid(&s.depth, k)).collect::<Result<Vec<_>>>()?;
    let half = features.len() / 2;
    let f: Vec<&Tensor> = features.iter().collect();
    let l: Vec<_> = labels.iter().collect();
    let d: Vec<&Tensor> = depths.iter().collect();
    let probe_cfg = ProbeConfig { seed, ..cfg.probe.clone() };
    let seg = probe_seg(&f[..half], &l[..half], cfg.scene.classes, &probe_cfg)?;
    let dep = probe_depth(&f[..half], &d[..half], &probe_cfg)?;
    let mut pred_labels = Vec::new();
    let mut gt_labels = Vec::new();
    let mut pred_depth = Vec::new();
    let mut gt_depth = Vec::new();
    for i in half..features.len() {
        pred_labels.extend(seg.predict(f[i])?.data);
        gt_labels.extend_from_slice(&labels[i].data);
        pred_depth.extend_from_slice(dep.predict(f[i])?.data());
        gt_depth.extend_from_slice(depths[i].data());
    }
    let n = pred_labels.len();
    let m = miou(
        &crate::synthworld::LabelMap::new(1, n, pred_labels)?,
        &crate::synthworld::LabelMap::new(1, n, gt_labels)?,
        cfg.scene.classes,
    )?;
    Ok(RunReport {
        seed,
        miou: m.miou,
        accuracy: m.accuracy,
        delta1: delta1(&pred_depth, &gt_depth)?,
        per_class_iou: m.per_class_iou,
        absent_classes: seg.absent_classes,
        trace: Vec::new(),
    })
}

/// Complete run for one seed.
pub fn run(cfg: &LabConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let eval = scenes(&cfg.scene, seed, cfg.eval_scenes, true)?;
    let source = &cfg.train.sources[0];
    let (params, trace) = match cfg.method {
        Method::Bilinear => (None, Vec::new()),
        Method::Learned => {
            let train_set = scenes(&cfg.scene, seed, cfg.train_scenes, false)?;
            let panel = if cfg.train.lambda > 0.0 { Some(cfg.panel()?) } else { None };
            let tcfg = TrainConfig { seed, ..cfg.train.clone() };
            let out = train(&train_set, &tcfg, &cfg.upsampler, panel.as_ref())?;
            (Some(out.params), out.trace)
        }
    };
    let feats = upsample_scenes(&eval, source, params.as_ref(), cfg)?;
    let mut report = evaluate(&feats, &eval, cfg, seed)?;
    report.trace = trace;
    Ok(RunArtifacts { report, params })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    GuidancePanel,
    FusionStrategy,
    WindowSweep,
    BilinearBaseline,
}

impl Suite {
    pub fn parse(tag: &str) -> Result<Suite> {
        match tag {
            "guidance-panel" => Ok(Suite::GuidancePanel),
            "fusion-strategy" => Ok(Suite::FusionStrategy),
            "window-sweep" => Ok(Suite::WindowSweep),
            "bilinear-baseline" => Ok(Suite::BilinearBaseline),
            other => Err(Error::config(format!("unknown ablation suite '{other}'"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Suite::GuidancePanel => "guidance-panel",
            Suite::FusionStrategy => "fusion-strategy",
            Suite::WindowSweep => "window-sweep",
            Suite::BilinearBaseline => "bilinear-baseline",
        }
    }

    /// Named configurations derived from `base`.
    pub fn configs(self, base: &LabConfig) -> Vec<(String, LabConfig)> {
        let mut out = Vec::new();
        match self {
            Suite::GuidancePanel => {
                let mut none = base.clone();
                none.train.lambda = 0.0;
                out.push(("none".into(), none));
                if base.guidance.len() > 1 {
                    for (i, g) in base.guidance.iter().enumerate() {
                        let mut single = base.clone();
                        single.guidance = vec![g.clone()];
                        out.push((format!("single-{i}"), single));
                    }
                }
                out.push(("all".into(), base.clone()));
            }
            Suite::FusionStrategy => {
                for (name, strategy) in [("mean", FusionStrategy::Mean), ("select", FusionStrategy::Select)] {
                    let mut c = base.clone();
                    c.strategy = strategy;
                    out.push((name.into(), c));
                }
            }
            Suite::WindowSweep => {
                for w in [3, 5, 7, 9] {
                    let mut c = base.clone();
                    c.relational.window = w;
                    out.push((format!("w{w}"), c));
                }
            }
            Suite::BilinearBaseline => {
                let mut bil = base.clone();
                bil.method = Method::Bilinear;
                out.push(("bilinear".into(), bil));
                let mut learned = base.clone();
                learned.method = Method::Learned;
                out.push(("learned".into(), learned));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    /// `None` when the run failed; see `error`.
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub config: String,
    pub runs: usize,
    pub excluded: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub delta1_mean: f64,
    pub delta1_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Population mean ± std per configuration over successful runs, in
    /// configuration order.
    pub fn summaries(&self) -> Vec<Summary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.config.as_str()) {
                names.push(&r.config);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.config == name).collect();
                let ok: Vec<&RunReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
                let (mm, ms) = mean_std(ok.iter().map(|r| r.miou));
                let (dm, ds) = mean_std(ok.iter().map(|r| r.delta1));
                Summary {
                    config: name.into(),
                    runs: ok.len(),
                    excluded: rows.len() - ok.len(),
                    miou_mean: mm,
                    miou_std: ms,
                    delta1_mean: dm,
                    delta1_std: ds,
                }
            })
            .collect()
    }

    pub fn summary(&self, config: &str) -> Option<Summary> {
        self.summaries().into_iter().find(|s| s.config == config)
    }
}

/// Population mean and std; NaN for an empty sequence.
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, math::sqrt(var))
}

/// Runs every configuration of `suite` for every seed. Failed runs are
/// recorded with their error and excluded from the summaries.
pub fn run_ablation(suite: Suite, base: &LabConfig, seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    let mut rows = Vec::new();
    for (name, cfg) in suite.configs(base) {
        for &seed in seeds {
            let (report, error) = match run(&cfg, seed) {
                Ok(a) => (Some(a.report), None),
                Err(e @ (Error::Divergence { .. } | Error::NonFinite(_))) => (None, Some(format!("{e}"))),
                Err(e) => return Err(e),
            };
            rows.push(AblationRow { config: name.clone(), seed, report, error });
        }
    }
    Ok(AblationTable { suite, rows })
}
