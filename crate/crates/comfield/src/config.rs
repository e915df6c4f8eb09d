//! Line-based `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; the
//! first unknown or malformed line aborts parsing. Extractors are declared
//! as `vfm.<i>.*` groups with `role = source | guidance`; when any group is
//! present the declared extractors replace the default panel.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use comfield_core::fusion::FusionStrategy;
use comfield_core::lab::{LabConfig, Method};
use comfield_core::synthworld::{Corruption, SyntheticVfm};

use crate::error::{HarnessError, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lab: LabConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { lab: LabConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Source,
    Guidance,
}

#[derive(Debug, Clone)]
struct VfmDecl {
    role: Role,
    vfm: SyntheticVfm,
    kind: String,
    rate: f64,
    magnitude: f64,
    shift: (isize, isize),
    blur: usize,
}

impl Default for VfmDecl {
    fn default() -> Self {
        VfmDecl {
            role: Role::Guidance,
            vfm: SyntheticVfm::clean(0, 2, 8),
            kind: "none".into(),
            rate: 0.05,
            magnitude: 10.0,
            shift: (0, 0),
            blur: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| HarnessError::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut lab = LabConfig::default();
        let mut vfms: BTreeMap<usize, VfmDecl> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(rest) = key.strip_prefix("vfm.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| HarnessError::config(format!("line {}: expected vfm.<i>.<field>", n + 1)))?;
                let idx: usize = parse(key, idx)?;
                set_vfm(vfms.entry(idx).or_default(), key, field, value)?;
            } else {
                set_key(&mut lab, key, value)?;
            }
        }
        if !vfms.is_empty() {
            let mut sources = Vec::new();
            let mut guidance = Vec::new();
            for d in vfms.into_values() {
                let corruption = match d.kind.as_str() {
                    "none" => Corruption::None,
                    "artifact" => Corruption::Artifact { rate: d.rate, magnitude: d.magnitude },
                    "misalign" => Corruption::Misalign { shift: d.shift, blur: d.blur },
                    other => return Err(HarnessError::config(format!("unknown corruption {other:?}"))),
                };
                let vfm = d.vfm.with_corruption(corruption);
                match d.role {
                    Role::Source => sources.push(vfm),
                    Role::Guidance => guidance.push(vfm),
                }
            }
            if sources.is_empty() {
                return Err(HarnessError::config("vfm declarations need at least one source"));
            }
            lab.train.sources = sources;
            lab.guidance = guidance;
        }
        lab.validate()?;
        Ok(RunConfig { lab })
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let bytes = fsio::read(p)?;
                let text = String::from_utf8(bytes).map_err(|_| HarnessError::config(format!("{}: not UTF-8", p.display())))?;
                RunConfig::parse(&text)
            }
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let l = &self.lab;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let sc = &l.scene;
        kv("scene.size", sc.size.to_string());
        kv("scene.classes", sc.classes.to_string());
        kv("scene.min_shapes", sc.min_shapes.to_string());
        kv("scene.max_shapes", sc.max_shapes.to_string());
        kv("scene.min_radius", fmt_f(sc.min_radius));
        kv("scene.max_radius", fmt_f(sc.max_radius));
        kv("scene.noise", fmt_f(sc.noise));
        kv("scene.jitter", fmt_f(sc.jitter));
        kv("scene.boundary_radius", sc.boundary_radius.to_string());
        kv("scene.train_count", l.train_scenes.to_string());
        kv("scene.eval_count", l.eval_scenes.to_string());
        let all = l.train.sources.iter().map(|v| ("source", v)).chain(l.guidance.iter().map(|v| ("guidance", v)));
        for (i, (role, v)) in all.enumerate() {
            kv(&format!("vfm.{i}.role"), role.into());
            kv(&format!("vfm.{i}.seed"), v.seed.to_string());
            kv(&format!("vfm.{i}.stride"), v.stride.to_string());
            kv(&format!("vfm.{i}.channels"), v.channels.to_string());
            match &v.corruption {
                Corruption::None => kv(&format!("vfm.{i}.corruption"), "none".into()),
                Corruption::Artifact { rate, magnitude } => {
                    kv(&format!("vfm.{i}.corruption"), "artifact".into());
                    kv(&format!("vfm.{i}.rate"), fmt_f(*rate));
                    kv(&format!("vfm.{i}.magnitude"), fmt_f(*magnitude));
                }
                Corruption::Misalign { shift, blur } => {
                    kv(&format!("vfm.{i}.corruption"), "misalign".into());
                    kv(&format!("vfm.{i}.shift_x"), shift.0.to_string());
                    kv(&format!("vfm.{i}.shift_y"), shift.1.to_string());
                    kv(&format!("vfm.{i}.blur"), blur.to_string());
                }
            }
        }
        let r = &l.relational;
        kv("relational.window", r.window.to_string());
        kv("relational.temperature", fmt_f(r.temperature));
        kv("relational.dim", r.dim.to_string());
        kv("relational.eps", fmt_f(r.eps));
        kv("relational.projection_seed", r.projection_seed.to_string());
        kv("fusion.beta", fmt_f(l.fusion.beta));
        kv("fusion.gamma", fmt_f(l.fusion.gamma));
        kv("fusion.std_floor", fmt_f(l.fusion.std_floor));
        kv("fusion.strategy", match l.strategy {
            FusionStrategy::Select => "select".into(),
            FusionStrategy::Mean => "mean".into(),
        });
        let u = &l.upsampler;
        kv("upsampler.dim", u.guidance_dim.to_string());
        kv("upsampler.window", u.attention_window.to_string());
        kv("upsampler.ratio", u.ratio.to_string());
        kv("upsampler.rope_base", fmt_f(u.rope_base));
        kv("upsampler.init_bias", fmt_f(u.init_bias));
        kv("upsampler.kernels", join(&u.kernel_sizes));
        kv("upsampler.widths", join(&u.hidden_widths));
        let t = &l.train;
        kv("train.lambda", fmt_f(t.lambda));
        kv("train.lr", fmt_f(t.learning_rate));
        kv("train.weight_decay", fmt_f(t.weight_decay));
        kv("train.batch", t.batch.to_string());
        kv("train.iterations", t.iterations.to_string());
        kv("train.crop", t.crop.to_string());
        kv("train.fine_stride", t.fine_stride.to_string());
        kv("train.method", match l.method {
            Method::Learned => "learned".into(),
            Method::Bilinear => "bilinear".into(),
        });
        let p = &l.probe;
        kv("probe.iterations", p.iterations.to_string());
        kv("probe.lr", fmt_f(p.learning_rate));
        kv("probe.weight_decay", fmt_f(p.weight_decay));
        kv("probe.depth_patch", p.depth_patch.to_string());
        kv("probe.depth_batch", p.depth_batch.to_string());
        kv("probe.depth_min", fmt_f(p.depth_range.0));
        kv("probe.depth_max", fmt_f(p.depth_range.1));
        s
    }
}

/// Shortest representation that parses back to the same bits.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn set_vfm(d: &mut VfmDecl, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "role" => {
            d.role = match value {
                "source" => Role::Source,
                "guidance" => Role::Guidance,
                _ => return Err(HarnessError::config(format!("{key}: expected source or guidance"))),
            }
        }
        "seed" => d.vfm.seed = parse(key, value)?,
        "stride" => d.vfm.stride = parse(key, value)?,
        "channels" => d.vfm.channels = parse(key, value)?,
        "corruption" => d.kind = value.to_string(),
        "rate" => d.rate = parse(key, value)?,
        "magnitude" => d.magnitude = parse(key, value)?,
        "shift_x" => d.shift.0 = parse(key, value)?,
        "shift_y" => d.shift.1 = parse(key, value)?,
        "blur" => d.blur = parse(key, value)?,
        _ => return Err(HarnessError::config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

fn set_key(l: &mut LabConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "scene.size" => l.scene.size = parse(key, v)?,
        "scene.classes" => l.scene.classes = parse(key, v)?,
        "scene.min_shapes" => l.scene.min_shapes = parse(key, v)?,
        "scene.max_shapes" => l.scene.max_shapes = parse(key, v)?,
        "scene.min_radius" => l.scene.min_radius = parse(key, v)?,
        "scene.max_radius" => l.scene.max_radius = parse(key, v)?,
        "scene.noise" => l.scene.noise = parse(key, v)?,
        "scene.jitter" => l.scene.jitter = parse(key, v)?,
        "scene.boundary_radius" => l.scene.boundary_radius = parse(key, v)?,
        "scene.train_count" => l.train_scenes = parse(key, v)?,
        "scene.eval_count" => l.eval_scenes = parse(key, v)?,
        "relational.window" => l.relational.window = parse(key, v)?,
        "relational.temperature" => l.relational.temperature = parse(key, v)?,
        "relational.dim" => l.relational.dim = parse(key, v)?,
        "relational.eps" => l.relational.eps = parse(key, v)?,
        "relational.projection_seed" => l.relational.projection_seed = parse(key, v)?,
        "fusion.beta" => l.fusion.beta = parse(key, v)?,
        "fusion.gamma" => l.fusion.gamma = parse(key, v)?,
        "fusion.std_floor" => l.fusion.std_floor = parse(key, v)?,
        "fusion.strategy" => {
            l.strategy = match v {
                "select" => FusionStrategy::Select,
                "mean" => FusionStrategy::Mean,
                _ => return Err(HarnessError::config(format!("{key}: expected select or mean"))),
            }
        }
        "upsampler.dim" => l.upsampler.guidance_dim = parse(key, v)?,
        "upsampler.window" => l.upsampler.attention_window = parse(key, v)?,
        "upsampler.ratio" => l.upsampler.ratio = parse(key, v)?,
        "upsampler.rope_base" => l.upsampler.rope_base = parse(key, v)?,
        "upsampler.init_bias" => l.upsampler.init_bias = parse(key, v)?,
        "upsampler.kernels" => l.upsampler.kernel_sizes = parse_list(key, v)?,
        "upsampler.widths" => l.upsampler.hidden_widths = parse_list(key, v)?,
        "train.lambda" => l.train.lambda = parse(key, v)?,
        "train.lr" => l.train.learning_rate = parse(key, v)?,
        "train.weight_decay" => l.train.weight_decay = parse(key, v)?,
        "train.batch" => l.train.batch = parse(key, v)?,
        "train.iterations" => l.train.iterations = parse(key, v)?,
        "train.crop" => l.train.crop = parse(key, v)?,
        "train.fine_stride" => l.train.fine_stride = parse(key, v)?,
        "train.method" => {
            l.method = match v {
                "learned" => Method::Learned,
                "bilinear" => Method::Bilinear,
                _ => return Err(HarnessError::config(format!("{key}: expected learned or bilinear"))),
            }
        }
        "probe.iterations" => l.probe.iterations = parse(key, v)?,
        "probe.lr" => l.probe.learning_rate = parse(key, v)?,
        "probe.weight_decay" => l.probe.weight_decay = parse(key, v)?,
        "probe.depth_patch" => l.probe.depth_patch = parse(key, v)?,
        "probe.depth_batch" => l.probe.depth_batch = parse(key, v)?,
        "probe.depth_min" => l.probe.depth_range.0 = parse(key, v)?,
        "probe.depth_max" => l.probe.depth_range.1 = parse(key, v)?,
        _ => return Err(HarnessError::config(format!("unknown key {key:?}"))),
    }
    Ok(())
}
