//! Dataset directories.
//!
//! `<dir>/manifest.txt` records the seed, the per-split scene counts and the
//! rendered run config. Each scene lives in `<dir>/<split>/<index>/` as
//! `image.ppm`, `labels.pgm`, `depth.fmap` (C=1) and `boundary.fmap` (C=2).
//! Images are stored with 8-bit precision, so a reloaded scene carries the
//! quantized image.

use std::path::{Path, PathBuf};

use comfield_core::evalkit::viz;
use comfield_core::lab::scenes;
use comfield_core::synthworld::{LabelMap, SceneSample};
use comfield_core::Tensor;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::fmap::{read_fmap, write_fmap};
use crate::fsio;
use crate::pnm::{self, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

fn sample_dir(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.name()).join(format!("{index:04}"))
}

pub fn write_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    fsio::create_dir(dir)?;
    let (h, w, _) = s.image.dims3()?;
    pnm::write(&dir.join("image.ppm"), &Raster { width: w, height: h, channels: 3, data: viz::image_rgb(&s.image)? })?;
    pnm::write(
        &dir.join("labels.pgm"),
        &Raster { width: s.labels.width, height: s.labels.height, channels: 1, data: s.labels.data.clone() },
    )?;
    write_fmap(&dir.join("depth.fmap"), &s.depth)?;
    write_fmap(&dir.join("boundary.fmap"), &s.boundary)
}

pub fn image_from_raster(r: &Raster, path: &Path) -> Result<Tensor> {
    if r.channels != 3 {
        return Err(HarnessError::malformed(path, "expected an RGB image"));
    }
    Ok(Tensor::new(&[r.height, r.width, 3], r.data.iter().map(|&b| b as f64 / 255.0).collect())?)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    image_from_raster(&pnm::read(path)?, path)
}

pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    let image = read_image(&dir.join("image.ppm"))?;
    let lp = dir.join("labels.pgm");
    let lr = pnm::read(&lp)?;
    if lr.channels != 1 {
        return Err(HarnessError::malformed(&lp, "expected a grayscale label map"));
    }
    let labels = LabelMap::new(lr.height, lr.width, lr.data)?;
    let depth = read_fmap(&dir.join("depth.fmap"))?;
    let boundary = read_fmap(&dir.join("boundary.fmap"))?;
    let (h, w, _) = image.dims3()?;
    if (labels.height, labels.width) != (h, w) || depth.shape() != [h, w, 1] || boundary.shape() != [h, w, 2] {
        return Err(HarnessError::malformed(dir, "sample files disagree in size"));
    }
    Ok(SceneSample { image, labels, depth, boundary })
}

/// Generates both splits for `seed`.
pub fn write_dataset(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    let lab = &cfg.lab;
    for (split, count) in [(Split::Train, lab.train_scenes), (Split::Eval, lab.eval_scenes)] {
        for (i, s) in scenes(&lab.scene, seed, count, split == Split::Eval)?.iter().enumerate() {
            write_sample(&sample_dir(dir, split, i), s)?;
        }
    }
    let manifest = format!(
        "seed = {seed}\ntrain = {}\neval = {}\n\n{}",
        lab.train_scenes,
        lab.eval_scenes,
        cfg.render()
    );
    fsio::write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// All scenes of one split, in index order.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<SceneSample>> {
    let mut out = Vec::new();
    loop {
        let d = sample_dir(dir, split, out.len());
        if !d.is_dir() {
            break;
        }
        out.push(read_sample(&d)?);
    }
    if out.is_empty() {
        return Err(HarnessError::malformed(dir.join(split.name()), "no samples found"));
    }
    Ok(out)
}
