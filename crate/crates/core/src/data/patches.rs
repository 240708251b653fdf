//! Seeded (LR, HR) training-patch sampling.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{load_png, stack};
use super::resize::resize_to;
use super::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// HR images loaded from disk, sorted by file name.
#[derive(Clone, Debug)]
pub struct ImageSet {
    names: Vec<String>,
    images: Arc<[ImageBuffer]>,
}

impl ImageSet {
    pub fn new(names: Vec<String>, images: Vec<ImageBuffer>) -> Result<Self> {
        if names.len() != images.len() {
            return Err(Error::Data("one name per image required".into()));
        }
        Ok(Self {
            names,
            images: images.into(),
        })
    }

    /// Every `*.png` directly inside `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let mut names = Vec::with_capacity(paths.len());
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            images.push(load_png(&p)?);
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
        Self::new(names, images)
    }

    /// The first `n` images (all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            names: self.names[..n].to_vec(),
            images: self.images[..n].to_vec().into(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn images(&self) -> &[ImageBuffer] {
        &self.images
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// HR patch side; must be divisible by `scale`.
    pub patch: usize,
    pub scale: usize,
    /// Random flips and transposition.
    pub augment: bool,
    pub seed: u64,
}

/// A training batch as NCHW tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
}

/// Bicubic LR counterpart of an HR patch.
pub fn degrade(hr: &ImageBuffer, scale: usize) -> Result<ImageBuffer> {
    resize_to(hr, hr.height() / scale, hr.width() / scale)
}

/// Endless stream of random (LR, HR) patch pairs in a seed-determined order.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    pool: Vec<usize>,
    set: ImageSet,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl PatchSampler {
    pub fn new(set: &ImageSet, cfg: SamplerConfig) -> Result<Self> {
        if cfg.scale == 0 || cfg.patch == 0 || !cfg.patch.is_multiple_of(cfg.scale) {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of scale {}",
                cfg.patch, cfg.scale
            )));
        }
        if set.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut pool = Vec::new();
        for (i, img) in set.images().iter().enumerate() {
            if img.height() < cfg.patch || img.width() < cfg.patch {
                warn!(
                    "skipping {} ({}x{}): smaller than {}px patch",
                    set.names()[i],
                    img.height(),
                    img.width(),
                    cfg.patch
                );
            } else {
                pool.push(i);
            }
        }
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "no training image is at least {0}x{0} pixels",
                cfg.patch
            )));
        }
        Ok(Self {
            pool,
            set: set.clone(),
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn next_pair(&mut self) -> Result<(ImageBuffer, ImageBuffer)> {
        let p = self.cfg.patch;
        let idx = self.pool[self.rng.random_range(0..self.pool.len())];
        let img = &self.set.images()[idx];
        let y = self.rng.random_range(0..=img.height() - p);
        let x = self.rng.random_range(0..=img.width() - p);
        let mut hr = img.crop(y, x, p, p)?;
        if self.cfg.augment {
            let (fh, fv, tr): (bool, bool, bool) =
                (self.rng.random(), self.rng.random(), self.rng.random());
            if fh {
                hr = hr.flip_horizontal();
            }
            if fv {
                hr = hr.flip_vertical();
            }
            if tr {
                hr = hr.transpose();
            }
        }
        let lr = degrade(&hr, self.cfg.scale)?;
        Ok((lr, hr))
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Batch> {
        let mut lrs = Vec::with_capacity(size);
        let mut hrs = Vec::with_capacity(size);
        for _ in 0..size {
            let (lr, hr) = self.next_pair()?;
            lrs.push(lr);
            hrs.push(hr);
        }
        Ok(Batch {
            lr: stack(&lrs)?,
            hr: stack(&hrs)?,
        })
    }
}

impl Iterator for PatchSampler {
    type Item = Result<(ImageBuffer, ImageBuffer)>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_pair())
    }
}

/// Load `hr_dir` and start a sampler with augmentation on.
pub fn sample_patches(
    hr_dir: impl AsRef<Path>,
    patch: usize,
    scale: usize,
    seed: u64,
) -> Result<PatchSampler> {
    let set = ImageSet::load_dir(hr_dir)?;
    PatchSampler::new(
        &set,
        SamplerConfig {
            patch,
            scale,
            augment: true,
            seed,
        },
    )
}
