//! Subcommands. Each one is a pure function of config, seed and input files.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use comfield_core::evalkit::viz;
use comfield_core::fusion::build_consensus;
use comfield_core::lab::{self, run_ablation, upsample_scenes, Method, Suite};
use comfield_core::numerics::mix64;
use comfield_core::numerics::resample::downsample_box;
use comfield_core::relational::{relational_field, Projection};
use comfield_core::synthworld::{extract, SyntheticVfm};
use comfield_core::training::{train, TrainConfig};
use comfield_core::upsampler::upsample;
use comfield_core::{FeatureMap, Tensor};

use crate::config::RunConfig;
use crate::dataset::{self, Split};
use crate::error::{HarnessError, Result};
use crate::fmap::{read_fmap, write_fmap};
use crate::pnm::{self, Raster};
use crate::{checkpoint, fsio, report, selftest};

#[derive(Debug, Parser)]
#[command(name = "comfield", version, about = "COM-field guided feature upsampling on synthetic scenes")]
pub struct Cli {
    /// Run configuration (`key = value` lines); defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a train/eval dataset directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract features of one image with a configured extractor.
    Featurize {
        #[arg(long)]
        image: PathBuf,
        /// Index into the configured sources followed by guidance extractors.
        #[arg(long, default_value_t = 0)]
        vfm: usize,
        /// Override the extractor's native stride.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entropy, spikiness and COM field of a feature map.
    Relate {
        #[arg(long)]
        input: PathBuf,
        /// Apply the seeded projection to `relational.dim` channels first.
        #[arg(long)]
        project: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consensus field over several feature maps.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the upsampler; writes `checkpoint.duwt` and `loss.csv`.
    Train {
        /// Dataset directory from `gen`; scenes are generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upsample a coarse feature map guided by an image.
    Upsample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and score linear probes on upsampled eval features.
    Probe {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Learned upsampler; without it the configured method must be bilinear.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train, probe and report in one run.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation suite over seeds `seed..seed+seeds`.
    Ablate {
        #[arg(long, value_parser = ["guidance-panel", "fusion-strategy", "window-sweep", "bilinear-baseline"])]
        suite: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a map as a PGM or PPM raster.
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: VizKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle, gradient and format checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VizKind {
    /// `H × W × 1` entropy map.
    Entropy,
    /// `H × W × 2` COM field.
    Com,
    /// `H × W × N` one-hot selection.
    Selection,
    /// `H × W × 3` image in `[0, 1]`.
    Image,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Gen { out } => dataset::write_dataset(&out, &cfg, seed),
        Command::Featurize { image, vfm, stride, out } => featurize(&cfg, &image, vfm, stride, &out),
        Command::Relate { input, project, out } => relate(&cfg, &input, project, &out),
        Command::Fuse { input, out } => fuse(&cfg, &input, &out),
        Command::Train { data, out } => train_cmd(&cfg, seed, data.as_deref(), &out),
        Command::Upsample { checkpoint, image, features, out } => upsample_cmd(&checkpoint, &image, &features, &out),
        Command::Probe { data, checkpoint, out } => probe(&cfg, seed, data.as_deref(), checkpoint.as_deref(), &out),
        Command::Eval { out } => eval(&cfg, seed, &out),
        Command::Ablate { suite, seeds, out } => ablate(&cfg, seed, &suite, seeds, &out),
        Command::Viz { input, kind, out } => viz_cmd(&cfg, &input, kind, &out),
        Command::Selftest => selftest_cmd(seed),
    }
}

fn extractors(cfg: &RunConfig) -> Vec<SyntheticVfm> {
    cfg.lab.train.sources.iter().chain(&cfg.lab.guidance).cloned().collect()
}

fn featurize(cfg: &RunConfig, image: &Path, index: usize, stride: Option<usize>, out: &Path) -> Result<()> {
    let all = extractors(cfg);
    let vfm = all
        .get(index)
        .ok_or_else(|| HarnessError::config(format!("extractor {index} out of range (have {})", all.len())))?;
    let img = dataset::read_image(image)?;
    write_fmap(out, &extract(vfm, &img, stride)?)
}

fn gray(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    pnm::write(path, &Raster { width: w, height: h, channels: 1, data })
}

fn rgb(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    pnm::write(path, &Raster { width: w, height: h, channels: 3, data })
}

fn as_map(t: Tensor) -> Result<Tensor> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Ok(t.reshape(&[h, w, 1])?)
}

fn relate(cfg: &RunConfig, input: &Path, project: bool, out: &Path) -> Result<()> {
    let f = read_fmap(input)?;
    let rel = &cfg.lab.relational;
    let phi = if project {
        Some(Projection::seeded(f.shape()[2], rel.dim, mix64(rel.projection_seed))?)
    } else {
        None
    };
    let field = relational_field(&f, phi.as_ref(), rel)?;
    let (h, w, _) = f.dims3()?;
    fsio::create_dir(out)?;
    gray(&out.join("entropy.pgm"), h, w, viz::entropy_gray(&field.entropy, rel.window)?)?;
    rgb(&out.join("com.ppm"), h, w, viz::com_rgb(&field.com)?)?;
    write_fmap(&out.join("entropy.fmap"), &as_map(field.entropy)?)?;
    write_fmap(&out.join("spikiness.fmap"), &as_map(field.spikiness)?)?;
    write_fmap(&out.join("com.fmap"), &field.com)
}

/// Sources are resampled to the finest input grid. Projections are seeded
/// per input position exactly as in the training guidance panel.
fn fuse(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let maps = inputs.iter().map(|p| read_fmap(p)).collect::<Result<Vec<_>>>()?;
    let rel = &cfg.lab.relational;
    let projs = maps
        .iter()
        .enumerate()
        .map(|(i, m)| Projection::seeded(m.shape()[2], rel.dim, mix64(rel.projection_seed ^ i as u64)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let h = maps.iter().map(|m| m.shape()[0]).max().unwrap_or(0);
    let w = maps.iter().map(|m| m.shape()[1]).max().unwrap_or(0);
    let refs: Vec<&FeatureMap> = maps.iter().collect();
    let prefs: Vec<&Projection> = projs.iter().collect();
    let c = build_consensus(&refs, &prefs, rel, &cfg.lab.fusion, (h, w))?;
    fsio::create_dir(out)?;
    gray(&out.join("selection.pgm"), h, w, viz::selection_gray(&c.selected_index(), maps.len()))?;
    rgb(&out.join("com.ppm"), h, w, viz::com_rgb(&c.com)?)?;
    write_fmap(&out.join("com.fmap"), &c.com)?;
    write_fmap(&out.join("selection.fmap"), &c.selection)?;
    write_fmap(&out.join("confidence.fmap"), &c.confidence)
}

fn split(cfg: &RunConfig, seed: u64, data: Option<&Path>, which: Split) -> Result<Vec<comfield_core::synthworld::SceneSample>> {
    match data {
        Some(dir) => dataset::read_split(dir, which),
        None => {
            let count = if which == Split::Eval { cfg.lab.eval_scenes } else { cfg.lab.train_scenes };
            Ok(lab::scenes(&cfg.lab.scene, seed, count, which == Split::Eval)?)
        }
    }
}

fn train_cmd(cfg: &RunConfig, seed: u64, data: Option<&Path>, out: &Path) -> Result<()> {
    let l = &cfg.lab;
    let scenes = split(cfg, seed, data, Split::Train)?;
    let panel = if l.train.lambda > 0.0 { Some(l.panel()?) } else { None };
    let tcfg = TrainConfig { seed, ..l.train.clone() };
    let outcome = train(&scenes, &tcfg, &l.upsampler, panel.as_ref())?;
    fsio::create_dir(out)?;
    fsio::write_atomic(&out.join("loss.csv"), report::trace_csv(&outcome.trace).as_bytes())?;
    checkpoint::write_checkpoint(&out.join("checkpoint.duwt"), &l.upsampler, &outcome.params)
}

/// The guidance image may be given at the output grid or at any integer
/// multiple of it; larger images are box-downsampled.
fn upsample_cmd(ckpt: &Path, image: &Path, features: &Path, out: &Path) -> Result<()> {
    let (ucfg, params) = checkpoint::read_checkpoint(ckpt)?;
    let f_lr = read_fmap(features)?;
    let mut img = dataset::read_image(image)?;
    let target = f_lr.shape()[0] * ucfg.ratio;
    let h = img.shape()[0];
    if target > 0 && h != target {
        if h % target != 0 {
            return Err(HarnessError::config(format!("image height {h} is not a multiple of the output grid {target}")));
        }
        img = downsample_box(&img, h / target)?;
    }
    write_fmap(out, &upsample(&img, &f_lr, &params, &ucfg)?)
}

fn probe(cfg: &RunConfig, seed: u64, data: Option<&Path>, ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let mut l = cfg.lab.clone();
    let params = match ckpt {
        Some(p) => {
            let (ucfg, params) = checkpoint::read_checkpoint(p)?;
            l.upsampler = ucfg;
            l.method = Method::Learned;
            Some(params)
        }
        None if l.method == Method::Learned => {
            return Err(HarnessError::config("probe with the learned method needs --checkpoint"));
        }
        None => None,
    };
    let scenes = split(cfg, seed, data, Split::Eval)?;
    let feats = upsample_scenes(&scenes, &l.train.sources[0], params.as_ref(), &l)?;
    let rep = lab::evaluate(&feats, &scenes, &l, seed)?;
    fsio::write_atomic(out, report::run_csv(method_tag(l.method), &rep).as_bytes())
}

fn method_tag(m: Method) -> &'static str {
    match m {
        Method::Learned => "learned",
        Method::Bilinear => "bilinear",
    }
}

fn eval(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let art = lab::run(&cfg.lab, seed)?;
    fsio::create_dir(out)?;
    fsio::write_atomic(&out.join("report.csv"), report::run_csv(method_tag(cfg.lab.method), &art.report).as_bytes())?;
    if let Some(p) = &art.params {
        fsio::write_atomic(&out.join("loss.csv"), report::trace_csv(&art.report.trace).as_bytes())?;
        checkpoint::write_checkpoint(&out.join("checkpoint.duwt"), &cfg.lab.upsampler, p)?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, seed: u64, suite: &str, seeds: u64, out: &Path) -> Result<()> {
    let suite = Suite::parse(suite)?;
    let seeds: Vec<u64> = (seed..seed + seeds).collect();
    let table = run_ablation(suite, &cfg.lab, &seeds)?;
    let text = report::ablation_table(&table);
    print!("{text}");
    fsio::create_dir(out)?;
    fsio::write_atomic(&out.join("ablation.csv"), report::ablation_csv(&table).as_bytes())?;
    fsio::write_atomic(&out.join("ablation.txt"), text.as_bytes())
}

fn viz_cmd(cfg: &RunConfig, input: &Path, kind: VizKind, out: &Path) -> Result<()> {
    let f = read_fmap(input)?;
    let (h, w, c) = f.dims3()?;
    let want = |n: usize| {
        if c == n {
            Ok(())
        } else {
            Err(HarnessError::malformed(input, format!("{kind:?} needs {n} channel(s), found {c}")))
        }
    };
    match kind {
        VizKind::Entropy => {
            want(1)?;
            gray(out, h, w, viz::entropy_gray(&f.reshape(&[h, w])?, cfg.lab.relational.window)?)
        }
        VizKind::Com => {
            want(2)?;
            rgb(out, h, w, viz::com_rgb(&f)?)
        }
        VizKind::Selection => {
            let idx = f
                .data()
                .chunks(c.max(1))
                .map(|a| a.iter().position(|&v| v == 1.0).unwrap_or(0))
                .collect::<Vec<_>>();
            gray(out, h, w, viz::selection_gray(&idx, c))
        }
        VizKind::Image => {
            want(3)?;
            rgb(out, h, w, viz::image_rgb(&f)?)
        }
    }
}

fn selftest_cmd(seed: u64) -> Result<()> {
    let checks = selftest::run_all(seed)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    if failed > 0 {
        return Err(HarnessError::SelftestFailed(failed));
    }
    Ok(())
}
